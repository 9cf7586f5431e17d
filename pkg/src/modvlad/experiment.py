"""In-memory pretrain -> finetune -> localize -> evaluate runs on a synthetic corpus."""
from __future__ import annotations

import time
from dataclasses import replace

from . import dataset as ds
from . import evaluation as ev
from . import localization as lo
from . import trainer as tr
from .config import Preset


def with_seed(p: Preset, seed: int) -> Preset:
    p = p.copy()
    p.corpus = replace(p.corpus, seed=seed)
    p.pretrain = replace(p.pretrain, seed=seed)
    p.finetune = replace(p.finetune, seed=seed)
    return p


def with_tree(p: Preset, tree_shape=(), T: float = 0.0) -> Preset:
    p = p.copy()
    p.model = replace(p.model, tree_shape=tuple(tree_shape))
    p.pretrain = replace(p.pretrain, T=T)
    p.finetune = replace(p.finetune, T=T)
    return p


def run(p: Preset, corpus: ds.Corpus | None = None, dummy_baseline: bool = True) -> dict:
    """Train on the finetune/train splits and score the eval split.

    Returns held-out MAP@K for the finetuned segment model (and, optionally,
    for the dummy baseline that reuses video probabilities), candidate recall
    and the two checkpoints.
    """
    t0 = time.perf_counter()
    corpus = corpus or ds.generate_corpus(p.corpus)
    C = p.model.class_count
    pre = tr.pretrain(corpus.train.records, p.model, p.pretrain)
    fine = tr.finetune(pre, corpus.finetune.records, corpus.finetune.segments, p.finetune, p.model)
    res = lo.run_pipeline(pre, fine, corpus.eval.records, p.pipeline)
    out = {
        "map": ev.evaluate_rankings(lo.ranking_keys(res.rankings), corpus.eval.segments, C)["map"],
        "recall": lo.candidate_recall(res.candidates, corpus.eval.segments),
        "pretrain": pre,
        "finetune": fine,
        "pipeline": res,
    }
    if dummy_baseline:
        dres = lo.run_pipeline(pre, None, corpus.eval.records, p.pipeline, dummy=True)
        out["dummy_map"] = ev.evaluate_rankings(lo.ranking_keys(dres.rankings),
                                                corpus.eval.segments, C)["map"]
    out["seconds"] = time.perf_counter() - t0
    return out
