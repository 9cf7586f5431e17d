"""Pretrain / finetune loops with Adam, step-decayed learning rate and L2 penalty.

Model-parallel execution: each root child of the mixture tree (an inner
mixture, or a leaf for one-layer trees) is a unit owned by one worker thread
for its forward and backward passes. The coordinator assembles the loss,
reduces in canonical leaf order and owns the optimizer step, so the result does
not depend on the worker count.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import mixture as mx
from . import nextvlad as nv
from . import numerics as nx
from .checkpoint import Checkpoint, CheckpointError, check_topology
from .dataset import SEGMENT_LEN
from .model import TreeModel, leaf_prefix, pad_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite: float | None):
        self.step = step
        self.last_finite = last_finite
        super().__init__(f"loss became non-finite at step {step}; last finite loss {last_finite}")


@dataclass
class TrainConfig:
    batch_size: int = 32
    base_lr: float = 2e-4
    lr_decay: float = 0.8
    decay_every_examples: int = 1_000_000
    epochs: int = 10
    max_steps: int = 0          # 0: run for ``epochs``
    dropout_rate: float = 0.5
    l2_penalty: float = 1e-5
    T: float = 0.0
    seed: int = 0
    workers: int = 1
    stop_grad_teacher: bool = False
    # "sum": per-example BCE summed over classes; "mean": averaged over classes
    bce_reduction: str = "sum"

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_every_examples < 1:
            raise ValueError("decay_every_examples must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.bce_reduction not in ("sum", "mean"):
            raise ValueError("bce_reduction must be 'sum' or 'mean'")

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]


def lr_at(examples_seen: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * cfg.lr_decay ** (examples_seen // cfg.decay_every_examples)


# -- example sources ----------------------------------------------------------

class VideoExamples:
    """Whole videos with their (noisy) video-level labels."""

    def __init__(self, records, class_count: int):
        self.records = list(records)
        self.class_count = class_count
        if not self.records:
            raise ValueError("no training videos")
        self.n_visual = self.records[0].visual.shape[1]
        self.n_audio = self.records[0].audio.shape[1]

    def __len__(self):
        return len(self.records)

    def batch(self, idx, dtype):
        recs = [self.records[i] for i in idx]
        vis, aud, mask = pad_batch(recs, self.n_visual, self.n_audio, dtype)
        y = np.zeros((len(recs), self.class_count), dtype)
        for b, r in enumerate(recs):
            y[b, list(r.video_labels)] = 1.0
        return vis, aud, mask, y


class SegmentExamples:
    """Labeled 5-frame windows; a window's label vector holds its positive classes."""

    def __init__(self, records, segments, class_count: int):
        by_id = {r.video_id: r for r in records}
        pos = {}
        for s in segments:
            if s.video_id not in by_id:
                raise ValueError(f"segment label references unknown video {s.video_id}")
            rec = by_id[s.video_id]
            if s.start_frame < 0 or s.start_frame + SEGMENT_LEN > rec.num_frames:
                raise ValueError(f"segment {s.video_id}@{s.start_frame} exceeds {rec.num_frames} frames")
            labels = pos.setdefault((s.video_id, s.start_frame), set())
            if s.positive:
                labels.add(s.class_id)
        self.keys = sorted(pos)
        if not self.keys:
            raise ValueError("no labeled segments")
        self.class_count = class_count
        self.visual = np.stack([by_id[v].visual[s:s + SEGMENT_LEN] for v, s in self.keys])
        self.audio = np.stack([by_id[v].audio[s:s + SEGMENT_LEN] for v, s in self.keys])
        self.labels = np.zeros((len(self.keys), class_count), np.float32)
        for n, key in enumerate(self.keys):
            self.labels[n, sorted(pos[key])] = 1.0

    def __len__(self):
        return len(self.keys)

    def batch(self, idx, dtype):
        idx = np.asarray(idx)
        return (self.visual[idx].astype(dtype), self.audio[idx].astype(dtype),
                np.ones((len(idx), SEGMENT_LEN), dtype), self.labels[idx].astype(dtype))


# -- loop ---------------------------------------------------------------------

def _rngs(seed: int, n_leaves: int):
    ss = np.random.SeedSequence(seed)
    kids = ss.spawn(n_leaves + 1)
    return np.random.Generator(np.random.PCG64(kids[0])), [
        np.random.Generator(np.random.PCG64(k)) for k in kids[1:]
    ]


def _rng_state(shuffle, leaves) -> dict:
    return {"shuffle": shuffle.bit_generator.state,
            "leaves": [g.bit_generator.state for g in leaves]}


def l2_term(params: dict, penalty: float) -> float:
    if penalty == 0:
        return 0.0
    return penalty * math.fsum(float(np.sum(v.astype(np.float64) ** 2))
                               for k, v in params.items() if nv.is_weight(k))


def train(model: TreeModel, examples, cfg: TrainConfig, diag: mx.DiagnosticLog | None = None,
          log_every: int = 1) -> Checkpoint:
    """Run the optimization loop in place on ``model`` and return a checkpoint."""
    cfg.validate()
    dtype = next(iter(model.params.values())).dtype
    shuffle_rng, leaf_rngs = _rngs(cfg.seed, model.num_leaves)
    adam = nx.AdamState.zeros_like(model.params)
    names = list(model.params)
    units = model.worker_units()
    label_scale = float(model.cfg.class_count) if cfg.bce_reduction == "sum" else 1.0
    n = len(examples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps) if cfg.epochs else cfg.max_steps
    step, seen, history, last_finite = 0, 0, [], None
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    def run_units(fn):
        if pool is None:
            return [fn(u) for u in units]
        return list(pool.map(fn, units))

    try:
        while step < total_steps:
            perm = shuffle_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                if step >= total_steps:
                    break
                idx = perm[start:start + cfg.batch_size]
                vis, aud, mask, y = examples.batch(idx, dtype)
                B = len(idx)

                def fwd(unit):
                    return [model.leaf_forward(i, vis, aud, mask, "train", leaf_rngs[i], cfg.dropout_rate)
                            for i in unit]

                outs = {}
                for unit, res in zip(units, run_units(fwd)):
                    outs.update(zip(unit, res))
                zs = [outs[i][0] for i in range(model.num_leaves)]

                tree = model.tree(cfg.T)
                if tree is None:
                    rows = nx.bce_with_logits_rows(y, zs[0])
                    data_loss = label_scale * float(rows.mean())
                    dzs = [label_scale * nx.bce_with_logits_grad(y, zs[0]) / B]
                    parts = {"root": mx.NodeParts(label_loss=float(rows.mean()))}
                    weight_grads = {}
                else:
                    res = mx.mod_loss(y, tree, zs, cfg.stop_grad_teacher, label_scale)
                    data_loss, dzs, parts, weight_grads = res.total, res.leaf_grads, res.parts, res.weight_grads
                reg = l2_term(model.params, cfg.l2_penalty)
                loss = data_loss + reg
                if not math.isfinite(loss):
                    raise TrainingDiverged(step, last_finite)
                last_finite = loss

                def bwd(unit):
                    return [nv.video_model_backward(dzs[i], outs[i][1], model.leaf_params(i)) for i in unit]

                grads = {}
                for unit, res_u in zip(units, run_units(bwd)):
                    for i, g in zip(unit, res_u):
                        p = leaf_prefix(i)
                        grads.update({p + k: v for k, v in g.items()})
                if tree is not None:
                    for node in tree.nodes():
                        key = f"mix_logits/{node.path}"
                        if key in model.params:
                            grads[key] = mx.softmax_weights_grad(node.mix_weights, weight_grads[node.path])
                for k in names:
                    g = grads.get(k)
                    if g is None:
                        g = np.zeros_like(model.params[k])
                    if cfg.l2_penalty and nv.is_weight(k):
                        g = g + 2.0 * cfg.l2_penalty * model.params[k]
                    grads[k] = np.asarray(g, dtype=dtype)

                nx.adam_step(model.params, grads, adam, lr_at(seen, cfg), names=names)
                if diag is not None and step % log_every == 0:
                    diag.record(step, parts, {"root": reg})
                history.append(loss)
                seen += B
                step += 1
    finally:
        if pool is not None:
            pool.shutdown()

    ckpt = Checkpoint(model.cfg.as_dict(), model.params, adam, seen, step,
                      _rng_state(shuffle_rng, leaf_rngs))
    ckpt.history = history
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> TreeModel:
    topo = dict(ckpt.topology)
    topo["tree_shape"] = tuple(topo.get("tree_shape", ()))
    try:
        cfg = nv.ModelConfig(**topo)
    except TypeError as exc:
        raise CheckpointError(f"unrecognized topology descriptor: {exc}") from exc
    return TreeModel(cfg, params={k: v.copy() for k, v in ckpt.params.items()})


def pretrain(records, model_cfg: nv.ModelConfig, cfg: TrainConfig,
             diag: mx.DiagnosticLog | None = None) -> Checkpoint:
    """Train a fresh model (single or tree) on whole videos with video-level labels."""
    with nx.precision("train"):
        model = TreeModel(model_cfg, seed=cfg.seed)
    examples = VideoExamples(records, model_cfg.class_count)
    return train(model, examples, cfg, diag)


def finetune(ckpt: Checkpoint, records, segments, cfg: TrainConfig,
             model_cfg: nv.ModelConfig | None = None,
             diag: mx.DiagnosticLog | None = None) -> Checkpoint:
    """Continue training a checkpoint on labeled 5-frame segments.

    Optimizer state and counters restart: finetuning is a new phase with its
    own learning-rate schedule.
    """
    if model_cfg is not None:
        check_topology(ckpt, model_cfg.as_dict())
    model = model_from_checkpoint(ckpt)
    examples = SegmentExamples(records, segments, model.cfg.class_count)
    return train(model, examples, cfg, diag)


def config_dict(cfg) -> dict:
    return asdict(cfg)
