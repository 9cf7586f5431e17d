"""Command-line entry point: ``modvlad <command> [flags]``.

Commands: gen-data, pretrain, finetune, localize, evaluate, gradcheck, inspect.
Every command that writes files writes them under ``--out`` together with a
``manifest.json`` and the fully resolved ``resolved.cfg`` (pass it back as
``--config`` to repeat the run).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cf
from . import dataset as ds
from . import evaluation as ev
from . import gradcheck as gc
from . import localization as lo
from . import mixture as mx
from . import trainer as tr
from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger("modvlad")

TREES = {"single": (), "mix": (3,), "mod": (4, 3)}


class CLIError(RuntimeError):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, args, resolved: dict, seed, inputs, outputs, t0: float) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": getattr(args, "config", None),
        "resolved": resolved,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "checksums": {str(p): _sha256(p) for p in outputs if Path(p).is_file()},
        "wall_clock_seconds": round(time.time() - t0, 3),
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(out / "manifest.json")


def _resolve(args) -> cf.Preset:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CLIError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("workers", "workers"), ("T", "T")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = str(v)
    if getattr(args, "tree", None):
        overrides["model.tree_shape"] = str(list(TREES[args.tree]))
    return cf.resolve(args.preset, args.config, overrides)


def _save_resolved(out: Path, p: cf.Preset) -> dict:
    kv = cf.to_kv(p)
    (out / "resolved.cfg").write_text("".join(f"{k}={v}\n" for k, v in sorted(kv.items())))
    return kv


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    t0 = time.time()
    p = _resolve(args)
    out = _out_dir(args)
    corpus = ds.generate_corpus(p.corpus)
    written = ds.save_corpus_dir(out, corpus)
    kv = _save_resolved(out, p)
    _write_manifest(out, args, kv, p.corpus.seed, [], written, t0)
    print(f"wrote {sum(len(getattr(corpus, s).records) for s in ('train', 'finetune', 'eval'))} videos to {out}")
    return 0


def cmd_pretrain(args) -> int:
    t0 = time.time()
    p = _resolve(args)
    out = _out_dir(args)
    corpus_dir = Path(args.corpus)
    p.model.class_count = ds.corpus_class_count(corpus_dir)
    split = ds.load_split(corpus_dir, "train")
    diag = mx.DiagnosticLog(out / "pretrain_diag.csv")
    try:
        ckpt = tr.pretrain(split.records, p.model, p.pretrain, diag)
    finally:
        diag.close()
    path = out / "pretrain.modk"
    save_checkpoint(path, ckpt)
    kv = _save_resolved(out, p)
    _write_manifest(out, args, kv, p.pretrain.seed, [corpus_dir / "train.modc"],
                    [path, out / "pretrain_diag.csv"], t0)
    print(f"pretrain: {ckpt.step} steps, final loss {ckpt.history[-1] if ckpt.history else float('nan'):.6f}")
    return 0


def cmd_finetune(args) -> int:
    t0 = time.time()
    p = _resolve(args)
    out = _out_dir(args)
    corpus_dir = Path(args.corpus)
    ckpt = load_checkpoint(args.checkpoint)
    split = ds.load_split(corpus_dir, "finetune")
    diag = mx.DiagnosticLog(out / "finetune_diag.csv")
    try:
        expected = None
        if args.strict_topology:
            p.model.class_count = ds.corpus_class_count(corpus_dir)
            expected = p.model
        ft = tr.finetune(ckpt, split.records, split.segments, p.finetune, expected, diag)
    finally:
        diag.close()
    path = out / "finetune.modk"
    save_checkpoint(path, ft)
    kv = _save_resolved(out, p)
    _write_manifest(out, args, kv, p.finetune.seed,
                    [args.checkpoint, corpus_dir / "finetune.modc", corpus_dir / "finetune_segments.csv"],
                    [path, out / "finetune_diag.csv"], t0)
    print(f"finetune: {ft.step} steps, final loss {ft.history[-1] if ft.history else float('nan'):.6f}")
    return 0


def cmd_localize(args) -> int:
    t0 = time.time()
    p = _resolve(args)
    out = _out_dir(args)
    corpus_dir = Path(args.corpus)
    split = ds.load_split(corpus_dir, args.split)
    vck = load_checkpoint(args.video_checkpoint)
    if args.dummy:
        sck = None
    elif args.segment_checkpoint:
        sck = load_checkpoint(args.segment_checkpoint)
    else:
        raise CLIError("localize needs --segment-checkpoint or --dummy")
    result = lo.run_pipeline(vck, sck, split.records, p.pipeline, dummy=args.dummy)
    rank_path = out / "rankings.csv"
    lo.write_rankings_csv(rank_path, result.rankings)
    summary = result.summary(split.segments if split.segments else None)
    summary["dummy"] = bool(args.dummy)
    lo.write_summary_json(out / "summary.json", summary)
    kv = _save_resolved(out, p)
    inputs = [args.video_checkpoint] + ([args.segment_checkpoint] if sck is not None else [])
    _write_manifest(out, args, kv, None, inputs, [rank_path, out / "summary.json"], t0)
    msg = f"localize: {result.scored_pairs} scored pairs"
    if "candidate_recall" in summary:
        msg += f", candidate recall {summary['candidate_recall']:.4f}"
    print(msg)
    return 0


def _plot_distill(log_path, png_path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = mx.read_diagnostic_log(log_path)
    steps = sorted({r["step"] for r in rows})
    distill = {s: 0.0 for s in steps}
    label = {s: 0.0 for s in steps}
    for r in rows:
        distill[r["step"]] += r["distill_loss"]
        if r["node_path"] == "root":
            label[r["step"]] = r["label_loss"]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    a1.plot(steps, [distill[s] for s in steps])
    a1.set_title("distillation loss (sum over nodes)")
    a1.set_xlabel("step")
    a2.plot(steps, [label[s] for s in steps])
    a2.set_title("root label loss")
    a2.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


def cmd_evaluate(args) -> int:
    t0 = time.time()
    out = _out_dir(args)
    rankings = ev.read_rankings_csv(args.rankings)
    segments = ds.read_segment_labels(args.labels)
    C = args.class_count
    if C is None:
        summary_path = Path(args.rankings).with_name("summary.json")
        if not summary_path.exists():
            raise CLIError("--class-count is required when no summary.json sits next to the rankings")
        C = json.loads(summary_path.read_text())["class_count"]
    metrics = ev.evaluate_rankings(rankings, segments, C, args.k)
    metrics["k"] = args.k
    path = out / "metrics.json"
    ev.write_metrics_json(path, metrics)
    outputs = [path]
    if args.plot:
        if not args.log:
            raise CLIError("--plot needs --log pointing at a diagnostic CSV")
        png = out / "distill.png"
        _plot_distill(args.log, png)
        outputs.append(png)
    _write_manifest(out, args, {"k": str(args.k), "class_count": str(C)}, None,
                    [args.rankings, args.labels], outputs, t0)
    print(f"MAP@{args.k} = {metrics['map']:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    p = _resolve(args)
    worst = gc.run_suite(p.model, range(args.seeds))
    ok = all(v < args.tol for v in worst.values())
    for name, v in worst.items():
        print(f"{'PASS' if v < args.tol else 'FAIL'} {name}: max rel err {v:.3e}")
    print(f"gradcheck {'passed' if ok else 'failed'} ({args.seeds} seeds, tol {args.tol:g})")
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    print(f"format_version: {ck.format_version}")
    print("topology:")
    for k in sorted(ck.topology):
        print(f"  {k}: {ck.topology[k]}")
    print(f"step: {ck.step}")
    print(f"examples_seen: {ck.examples_seen}")
    print(f"optimizer_state: {'yes' if ck.adam is not None else 'no'}")
    print(f"tensors: {len(ck.params)} ({sum(v.size for v in ck.params.values())} values)")
    for k, v in ck.params.items():
        print(f"  {k} {list(v.shape)} {v.dtype} norm={float(np.linalg.norm(v.astype(np.float64))):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modvlad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--preset", default="tiny", choices=sorted(cf.PRESETS))
        sp.add_argument("--config", help="key=value config file (overrides the preset)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable; wins over --config")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(sp)
    sp.add_argument("--spec", dest="config", help="alias of --config")
    sp.set_defaults(func=cmd_gen_data)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        sp = sub.add_parser(name, help=f"{name} a model")
        common(sp)
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--T", type=float, help="distillation temperature (0 disables)")
        if name == "pretrain":
            sp.add_argument("--tree", choices=sorted(TREES))
        else:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--strict-topology", action="store_true",
                            help="require the checkpoint topology to match the resolved model config")
        sp.set_defaults(func=func)

    sp = sub.add_parser("localize", help="rank segments per class")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="eval", choices=sorted(ds.SPLIT_FILES))
    sp.add_argument("--video-checkpoint", required=True)
    sp.add_argument("--segment-checkpoint")
    sp.add_argument("--dummy", action="store_true", help="score segments with video-level predictions")
    sp.set_defaults(func=cmd_localize)

    sp = sub.add_parser("evaluate", help="MAP@K of a rankings CSV")
    sp.add_argument("--rankings", required=True)
    sp.add_argument("--labels", required=True, help="ground-truth segment label CSV")
    sp.add_argument("--class-count", type=int)
    sp.add_argument("--k", type=int, default=ev.DEFAULT_K)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot", action="store_true", help="plot the distillation trajectory from --log")
    sp.add_argument("--log", help="diagnostic CSV written by pretrain/finetune")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    common(sp, out=False)
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("inspect", help="summarize a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MOD_LOG_LEVEL", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, cf.ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
