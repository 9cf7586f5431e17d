"""Mean average precision at K over per-class segment rankings."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import DomainError

DEFAULT_K = 100_000


@dataclass
class RankedList:
    class_id: int
    items: list = field(default_factory=list)   # (segment key, rel) pairs, rank ascending

    @property
    def relevance(self) -> list:
        return [r for _, r in self.items]


def average_precision_at_k(rel, n_positive: int, K: int = DEFAULT_K) -> float:
    """Sum of precision@k at every relevant rank k <= K, divided by ``n_positive``.

    ``rel`` is a rank-ordered sequence of 0/1 flags (or a :class:`RankedList`).
    Returns 0 when the class has no positives.
    """
    if isinstance(rel, RankedList):
        rel = rel.relevance
    rel = np.asarray(rel)[:K]
    if rel.size and not np.all((rel == 0) | (rel == 1)):
        raise DomainError("relevance flags must be 0 or 1")
    if n_positive < 0:
        raise DomainError("n_positive must be >= 0")
    if n_positive == 0 or rel.size == 0:
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum((hits / ranks) * rel) / n_positive)


def map_at_k(lists: dict, n_positive: dict, class_count: int | None = None,
             K: int = DEFAULT_K) -> float:
    """Unweighted mean of per-class AP@K over ``class_count`` classes.

    ``lists`` maps class id to relevance flags (or RankedList); classes without
    a list or without positives contribute 0.
    """
    classes = range(class_count) if class_count is not None else sorted(set(lists) | set(n_positive))
    if len(classes) < 1:
        raise DomainError("need at least one class")
    aps = [average_precision_at_k(lists.get(c, []), n_positive.get(c, 0), K) for c in classes]
    return float(sum(aps) / len(aps))


def evaluate_rankings(rankings: dict, segments, class_count: int, K: int = DEFAULT_K) -> dict:
    """Score per-class rankings of ``(video_id, start_frame)`` keys against segment labels.

    Returns ``{"map": ..., "per_class": [{"class_id", "ap", "n_positive"}, ...]}``.
    """
    positives = {(s.video_id, s.start_frame, s.class_id) for s in segments if s.positive}
    n_pos = {}
    for _, _, c in positives:
        n_pos[c] = n_pos.get(c, 0) + 1
    per_class = []
    for c in range(class_count):
        rel = [1 if (v, s, c) in positives else 0 for v, s in rankings.get(c, [])]
        per_class.append({"class_id": c, "ap": average_precision_at_k(rel, n_pos.get(c, 0), K),
                          "n_positive": n_pos.get(c, 0)})
    return {"map": float(sum(p["ap"] for p in per_class) / class_count), "per_class": per_class}


def read_rankings_csv(path) -> dict:
    """``class_id,rank,video_id,start_frame,score`` CSV -> class -> rank-ordered keys."""
    by_class = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["class_id", "rank", "video_id", "start_frame", "score"]:
            raise ValueError(f"unexpected rankings header {reader.fieldnames}")
        for r in reader:
            by_class.setdefault(int(r["class_id"]), []).append(
                (int(r["rank"]), r["video_id"], int(r["start_frame"])))
    return {c: [(v, s) for _, v, s in sorted(rows)] for c, rows in by_class.items()}


def write_metrics_json(path, metrics: dict) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
