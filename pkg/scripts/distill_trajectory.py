"""Log and plot the per-step distillation loss of a mixture during pretraining.

    python3 scripts/distill_trajectory.py --tree 4 3 --T 20 --out results/trajectory
"""
import argparse
from pathlib import Path

from modvlad import config as cf
from modvlad import dataset as ds
from modvlad import experiment as ex
from modvlad import mixture as mx
from modvlad import trainer as tr
from modvlad.cli import _plot_distill


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tree", type=int, nargs="+", default=[3])
    ap.add_argument("--T", type=float, default=20.0)
    ap.add_argument("--out", default="results/trajectory")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = ex.with_tree(ex.with_seed(cf.preset(args.preset), args.seed), tuple(args.tree), args.T)
    corpus = ds.generate_corpus(p.corpus)
    log = mx.DiagnosticLog(out / "pretrain_diag.csv")
    try:
        tr.pretrain(corpus.train.records, p.model, p.pretrain, log)
    finally:
        log.close()
    _plot_distill(out / "pretrain_diag.csv", out / "distill.png")

    rows = mx.read_diagnostic_log(out / "pretrain_diag.csv")
    steps = sorted({r["step"] for r in rows})
    total = {s: 0.0 for s in steps}
    for r in rows:
        total[r["step"]] += r["distill_loss"]
    series = [total[s] for s in steps]
    # skip the first few noisy steps, then find the dip in the first half
    lo_i = min(range(min(10, len(series) - 1), max(11, len(series) // 2)), key=series.__getitem__)
    print(f"{len(steps)} steps; distillation loss: step 0 {series[0]:.4f}, max of first 10 steps "
          f"{max(series[:10]):.4f}, dip {series[lo_i]:.4f} at step {steps[lo_i]}, final {series[-1]:.4f}")

if __name__ == "__main__":
    main()
