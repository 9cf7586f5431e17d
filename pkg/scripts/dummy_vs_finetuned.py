"""Dummy prediction vs finetuned single model on the desk corpus, several seeds.

    python3 scripts/dummy_vs_finetuned.py --seeds 0 1 2 --out results/dummy_vs_finetuned.json
"""
import argparse
import json
from pathlib import Path

from modvlad import config as cf
from modvlad import experiment as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="results/dummy_vs_finetuned.json")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        r = ex.run(ex.with_seed(cf.preset(args.preset), seed))
        rows.append({"seed": seed, "dummy_map": r["dummy_map"], "finetuned_map": r["map"],
                     "candidate_recall": r["recall"], "seconds": round(r["seconds"], 1)})
        print(f"seed {seed}: dummy {r['dummy_map']:.4f}  finetuned {r['map']:.4f}  "
              f"recall {r['recall']:.3f}  ({r['seconds']:.0f}s)", flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
