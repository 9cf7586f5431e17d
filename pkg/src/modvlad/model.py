"""A tree of NeXtVLAD leaf models with their mixing structure."""
from __future__ import annotations

import numpy as np

from . import mixture as mx
from . import nextvlad as nv
from . import numerics as nx


def leaf_prefix(i: int) -> str:
    return f"leaf{i:02d}/"


class TreeModel:
    """Leaf parameters plus (optionally learnable) mixing weights.

    ``params`` is one flat dict: ``leafNN/<tensor>`` for every leaf and
    ``mix_logits/<node path>`` when the mixing weights are learnable.
    """

    def __init__(self, cfg: nv.ModelConfig, params: dict | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for i in range(cfg.num_leaves):
                for k, v in nv.init_video_model(cfg, rng).items():
                    params[leaf_prefix(i) + k] = v
            if cfg.learnable_weights and cfg.tree_shape:
                for node in mx.build_tree(cfg.tree_shape).nodes():
                    params[f"mix_logits/{node.path}"] = np.zeros(len(node.children), nx.float_dtype())
        self.params = params

    @property
    def num_leaves(self) -> int:
        return self.cfg.num_leaves

    def leaf_params(self, i: int) -> dict:
        return nv.sub_params(self.params, leaf_prefix(i))

    def tree(self, T: float):
        tree = mx.build_tree(self.cfg.tree_shape, T)
        if tree is not None and self.cfg.learnable_weights:
            for node in tree.nodes():
                key = f"mix_logits/{node.path}"
                if key in self.params:
                    node.mix_weights = nx.softmax(self.params[key].astype(np.float64))
        return tree

    def worker_units(self) -> list:
        """Leaf groups that can be evaluated independently: one per root child."""
        tree = self.tree(0.0)
        if tree is None:
            return [[0]]
        return [c.leaves() if isinstance(c, mx.MixtureNode) else [c] for c in tree.children]

    def leaf_forward(self, i, visual, audio, mask=None, mode="eval", rng=None, dropout_rate=0.0):
        return nv.video_model_forward(visual, audio, self.leaf_params(i), mode, rng,
                                      dropout_rate, mask, self.cfg.global_norm)

    def predict_logits(self, visual, audio, mask=None) -> np.ndarray:
        """Eval-mode root logits (the mixture prediction, or the single model's)."""
        zs = [self.leaf_forward(i, visual, audio, mask)[0] for i in range(self.num_leaves)]
        tree = self.tree(0.0)
        if tree is None:
            return zs[0]

        def mix(node):
            kids = [mix(c) if isinstance(c, mx.MixtureNode) else zs[c] for c in node.children]
            return mx.mix_logits(kids, node.mix_weights)

        return mix(tree)


def pad_batch(records, n_visual: int, n_audio: int, dtype=np.float32):
    """Stack variable-length records into padded ``(B, M, N)`` arrays plus a frame mask."""
    M = max(r.num_frames for r in records)
    B = len(records)
    vis = np.zeros((B, M, n_visual), dtype)
    aud = np.zeros((B, M, n_audio), dtype)
    mask = np.zeros((B, M), dtype)
    for b, r in enumerate(records):
        m = r.num_frames
        vis[b, :m] = r.visual
        aud[b, :m] = r.audio
        mask[b, :m] = 1.0
    return vis, aud, mask
