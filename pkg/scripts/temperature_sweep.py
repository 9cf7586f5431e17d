"""Held-out MAP of a finetuned 3-model mixture across distillation temperatures.

``--bce-reduction mean`` reproduces the class-averaged label loss, under which
the distillation term dominates (see README).

    python3 scripts/temperature_sweep.py --temps 0 1 5 20 --seeds 0 1 2
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from modvlad import config as cf
from modvlad import experiment as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--temps", type=float, nargs="+", default=[0.0, 1.0, 5.0, 20.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--tree", type=int, nargs="+", default=[3], help="tree shape, e.g. 3 or 4 3")
    ap.add_argument("--bce-reduction", choices=["sum", "mean"], default="sum")
    ap.add_argument("--stop-grad-teacher", action="store_true")
    ap.add_argument("--out", default="results/temperature_sweep.json")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        for T in args.temps:
            p = ex.with_tree(ex.with_seed(cf.preset(args.preset), seed), tuple(args.tree), T)
            for section in ("pretrain", "finetune"):
                setattr(p, section, replace(getattr(p, section), bce_reduction=args.bce_reduction,
                                            stop_grad_teacher=args.stop_grad_teacher))
            r = ex.run(p, dummy_baseline=False)
            rows.append({"seed": seed, "T": T, "map": r["map"], "seconds": round(r["seconds"], 1)})
            print(f"seed {seed} T={T:g}: MAP {r['map']:.4f} ({r['seconds']:.0f}s)", flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"args": vars(args), "rows": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()
