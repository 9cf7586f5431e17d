"""Candidate generation, segment scoring, score fusion and per-class retrieval."""
from __future__ import annotations

import csv
import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint
from .dataset import SEGMENT_LEN, segment_windows
from .model import TreeModel, pad_batch
from .trainer import model_from_checkpoint


@dataclass
class ValueModelConfig:
    vid_exponent: float = 0.05
    seg_exponent: float = 0.95

    def __post_init__(self):
        if self.vid_exponent < 0 or self.seg_exponent < 0:
            raise ValueError("value-model exponents must be >= 0")


@dataclass
class PipelineConfig:
    n_candidates: int = 20
    top_k: int = 10_000
    stride: int = SEGMENT_LEN
    value_model: ValueModelConfig = field(default_factory=ValueModelConfig)
    video_batch: int = 32
    segment_batch: int = 512


@dataclass(frozen=True)
class ScoredSegment:
    video_id: str
    start_frame: int
    class_id: int
    p_vid: float
    p_seg: float
    fused: float

    def sort_key(self):
        return (-self.fused, self.video_id, self.start_frame)


def value_model(p_vid, p_seg, cfg: ValueModelConfig | None = None):
    """``p_vid ** a * p_seg ** b`` with ``0 ** 0 == 1``."""
    cfg = cfg or ValueModelConfig()
    pv = np.asarray(p_vid, dtype=np.float64)
    ps = np.asarray(p_seg, dtype=np.float64)
    for name, p in (("p_vid", pv), ("p_seg", ps)):
        if np.any(~((p >= 0) & (p <= 1))):
            raise nx.DomainError(f"{name} must lie in [0, 1]")
    # numpy already defines 0.0 ** 0.0 == 1.0
    out = np.power(pv, cfg.vid_exponent) * np.power(ps, cfg.seg_exponent)
    return float(out) if out.ndim == 0 else out


def candidate_topics(video_logits, n: int = 20) -> list:
    """Top-``n`` classes by score, descending, ties by ascending class id."""
    z = np.asarray(video_logits)
    if n > z.size:
        raise ValueError(f"n={n} exceeds class count {z.size}")
    order = np.lexsort((np.arange(z.size), -z))
    return [int(c) for c in order[:n]]


def candidate_recall(candidates: dict, segments) -> float:
    """Fraction of positive segment labels whose class is in the video's candidate list."""
    hits = total = 0
    for s in segments:
        if not s.positive:
            continue
        total += 1
        hits += s.class_id in candidates.get(s.video_id, ())
    return hits / total if total else 1.0


def _video_logits(model: TreeModel, records, batch: int) -> np.ndarray:
    cfg = model.cfg
    dtype = next(iter(model.params.values())).dtype
    out = []
    for i in range(0, len(records), batch):
        vis, aud, mask = pad_batch(records[i:i + batch], cfg.n_visual, cfg.n_audio, dtype)
        out.append(model.predict_logits(vis, aud, mask))
    return np.concatenate(out).astype(np.float64)


def _as_model(m) -> TreeModel:
    return model_from_checkpoint(m) if isinstance(m, Checkpoint) else m


@dataclass
class PipelineResult:
    rankings: dict                       # class id -> ranked ScoredSegment list
    candidates: dict                     # video id -> candidate class list
    class_count: int
    scored_pairs: int = 0

    def summary(self, segments=None) -> dict:
        out = {
            "class_count": self.class_count,
            "scored_pairs": self.scored_pairs,
            "per_class_counts": {str(c): len(self.rankings.get(c, [])) for c in range(self.class_count)},
        }
        if segments is not None:
            out["candidate_recall"] = candidate_recall(self.candidates, segments)
        return out


def run_pipeline(video_model, segment_model, records, cfg: PipelineConfig | None = None,
                 dummy: bool = False) -> PipelineResult:
    """Three-phase localization over ``records``.

    Phase 1 picks candidate classes from video-level probabilities; phase 2
    scores every window for those classes with ``segment_model`` (eval mode),
    or copies the video probabilities when ``dummy`` is set; phase 3 fuses the
    two scores and keeps the best ``top_k`` segments per class.
    """
    cfg = cfg or PipelineConfig()
    vmodel = _as_model(video_model)
    smodel = vmodel if dummy else _as_model(segment_model)
    C = vmodel.cfg.class_count
    records = list(records)

    vlogits = _video_logits(vmodel, records, cfg.video_batch)
    p_vid_all = nx.sigmoid(vlogits)
    candidates = {r.video_id: candidate_topics(z, min(cfg.n_candidates, C))
                  for r, z in zip(records, vlogits)}

    windows = []   # (record index, start)
    for ri, r in enumerate(records):
        windows.extend((ri, s) for s, _, _ in segment_windows(r, cfg.stride))
    if dummy:
        p_seg_all = np.stack([p_vid_all[ri] for ri, _ in windows]) if windows else np.zeros((0, C))
    else:
        dtype = next(iter(smodel.params.values())).dtype
        chunks = []
        for i in range(0, len(windows), cfg.segment_batch):
            part = windows[i:i + cfg.segment_batch]
            vis = np.stack([records[ri].visual[s:s + SEGMENT_LEN] for ri, s in part]).astype(dtype)
            aud = np.stack([records[ri].audio[s:s + SEGMENT_LEN] for ri, s in part]).astype(dtype)
            chunks.append(smodel.predict_logits(vis, aud))
        p_seg_all = nx.sigmoid(np.concatenate(chunks).astype(np.float64)) if chunks else np.zeros((0, C))

    scored = []
    for (ri, start), p_seg in zip(windows, p_seg_all):
        rec = records[ri]
        cands = candidates[rec.video_id]
        fused = value_model(p_vid_all[ri, cands], p_seg[cands], cfg.value_model)
        for c, pv, ps, f in zip(cands, p_vid_all[ri, cands], p_seg[cands], fused):
            scored.append(ScoredSegment(rec.video_id, start, c, float(pv), float(ps), float(f)))
    return PipelineResult(rank_segments(scored, C, cfg.top_k), candidates, C, len(scored))


def rank_segments(scored, class_count: int, top_k: int = 10_000) -> dict:
    """Per class, the ``top_k`` best segments: fused desc, then video id, then start frame."""
    per_class = {c: [] for c in range(class_count)}
    for s in scored:
        per_class[s.class_id].append(s)
    return {c: heapq.nsmallest(top_k, items, key=ScoredSegment.sort_key)
            for c, items in per_class.items()}


def write_rankings_csv(path, rankings: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "rank", "video_id", "start_frame", "score"])
        for c in sorted(rankings):
            for rank, s in enumerate(rankings[c], start=1):
                w.writerow([c, rank, s.video_id, s.start_frame, f"{s.fused:.9g}"])


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ranking_keys(rankings: dict) -> dict:
    return {c: [(s.video_id, s.start_frame) for s in items] for c, items in rankings.items()}
