import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from modvlad import evaluation as ev
from modvlad import numerics as nx
from modvlad.dataset import SegmentLabel

flags = st.lists(st.integers(0, 1), max_size=30)


def test_ap_examples():
    assert ev.average_precision_at_k([1, 1], 2, 5) == 1.0
    assert ev.average_precision_at_k([1, 0, 1], 2, 3) == pytest.approx(0.833333, abs=1e-6)
    assert ev.average_precision_at_k([0, 0, 0], 2) == 0.0
    assert ev.average_precision_at_k([1, 0, 1], 0) == 0.0


def test_ap_ranked_list_input():
    rl = ev.RankedList(3, [(("a", 0), 1), (("b", 5), 0), (("c", 0), 1)])
    assert ev.average_precision_at_k(rl, 2, 3) == ev.average_precision_at_k([1, 0, 1], 2, 3)


def test_ap_rejects_bad_flags():
    with pytest.raises(nx.DomainError):
        ev.average_precision_at_k([1, 2, 0], 2)


def test_map_examples():
    assert ev.map_at_k({0: [1, 1], 1: [1, 0, 0, 1]}, {0: 2, 1: 2}) == pytest.approx((1.0 + 0.75) / 2)
    assert ev.map_at_k({0: [1], 1: [0, 1]}, {0: 1, 1: 2}) == pytest.approx((1.0 + 0.25) / 2)
    assert ev.map_at_k({4: [0, 1, 1]}, {4: 3}) == ev.average_precision_at_k([0, 1, 1], 3)


def test_map_counts_classes_without_positives():
    assert ev.map_at_k({0: [1]}, {0: 1}, class_count=4) == 0.25


def test_map_matches_brute_force_oracle_50_instances():
    rng = np.random.default_rng(3)
    for _ in range(50):
        C = int(rng.integers(1, 6))
        K = int(rng.integers(1, 40))
        lists, npos = {}, {}
        for c in range(C):
            rel = (rng.random(int(rng.integers(0, 50))) < rng.random()).astype(int).tolist()
            lists[c] = rel
            npos[c] = sum(rel) + int(rng.integers(0, 4))
        ref = sum(oracles.average_precision(lists[c], npos[c], K) for c in range(C)) / C
        assert abs(ev.map_at_k(lists, npos, C, K) - ref) <= 1e-12


@given(flags, st.integers(0, 5), st.integers(1, 40))
def test_ap_bounded_and_matches_oracle(rel, extra, K):
    n = sum(rel) + extra
    ap = ev.average_precision_at_k(rel, n, K)
    assert 0.0 <= ap <= 1.0
    assert ap == pytest.approx(oracles.average_precision(rel, n, K), abs=1e-12)


@given(flags, flags, st.integers(1, 30))
def test_ap_ignores_items_after_k(head, tail, K):
    rel = (head + [0] * K)[:K]
    n = sum(rel) + sum(tail)
    assert ev.average_precision_at_k(rel + tail, n, K) == ev.average_precision_at_k(rel, n, K)


@given(flags, st.data())
def test_moving_hit_earlier_never_hurts(rel, data):
    swaps = [i for i in range(len(rel) - 1) if rel[i] == 0 and rel[i + 1] == 1]
    if not swaps:
        return
    i = data.draw(st.sampled_from(swaps))
    better = list(rel)
    better[i], better[i + 1] = 1, 0
    n = sum(rel)
    assert ev.average_precision_at_k(better, n) >= ev.average_precision_at_k(rel, n)


def test_evaluate_rankings_uses_ground_truth_counts():
    segs = [SegmentLabel("a", 0, 0, True), SegmentLabel("b", 5, 0, True), SegmentLabel("a", 5, 0, False),
            SegmentLabel("a", 0, 1, False)]
    # only one of the two positives is retrieved
    out = ev.evaluate_rankings({0: [("a", 0), ("a", 5)]}, segs, class_count=2)
    assert out["per_class"][0] == {"class_id": 0, "ap": 0.5, "n_positive": 2}
    assert out["per_class"][1]["n_positive"] == 0
    assert out["map"] == 0.25


def test_rankings_csv_and_metrics_json(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("class_id,rank,video_id,start_frame,score\n0,2,b,5,0.1\n0,1,a,0,0.9\n3,1,c,10,0.5\n")
    assert ev.read_rankings_csv(path) == {0: [("a", 0), ("b", 5)], 3: [("c", 10)]}
    ev.write_metrics_json(tmp_path / "m.json", {"map": 0.5})
    assert '"map": 0.5' in (tmp_path / "m.json").read_text()
