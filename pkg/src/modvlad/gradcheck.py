"""Finite-difference suites over every analytic gradient in the package (64-bit).

Large tensors are checked on a seeded sample of ``max_coords`` coordinates;
``max_coords=None`` checks every coordinate.
"""
from __future__ import annotations

import numpy as np

from . import mixture as mx
from . import nextvlad as nv
from . import numerics as nx


def pool_error(cfg: nv.ModelConfig, seed: int, frames: int = 4, batch: int = 2,
               max_coords: int | None = 64) -> float:
    rng = np.random.default_rng(seed)
    params = nv.init_pool_params(rng, cfg.n_visual, cfg.expansion, cfg.groups, cfg.clusters)
    X = rng.standard_normal((batch, frames, cfg.n_visual))
    mask = np.ones((batch, frames))
    mask[-1, frames - 1:] = 0.0
    upstream = rng.standard_normal((batch, cfg.clusters * cfg.expansion * cfg.n_visual // cfg.groups))

    def f(p):
        out, ws = nv.nextvlad_pool_forward(p["frames"], {k: v for k, v in p.items() if k != "frames"},
                                           mask, cfg.global_norm)
        g, dX = nv.nextvlad_pool_backward(upstream, ws, p)
        g["frames"] = dX
        return float((out * upstream).sum()), g

    return nx.finite_diff_gradcheck(f, {**params, "frames": X}, max_coords=max_coords,
                                    rng=np.random.default_rng(seed))


def video_model_error(cfg: nv.ModelConfig, seed: int, frames: int = 6, batch: int = 2,
                      dropout_rate: float = 0.5, max_coords: int | None = 64) -> float:
    """End-to-end BCE through both pools, dropout (fixed mask), FC, gating and classifier."""
    rng = np.random.default_rng(seed)
    params = nv.init_video_model(cfg, rng)
    # non-zero biases so their gradients are exercised away from the init point
    for k, v in params.items():
        if not nv.is_weight(k):
            v += 0.1 * rng.standard_normal(v.shape)
    vis = rng.standard_normal((batch, frames, cfg.n_visual))
    aud = rng.standard_normal((batch, frames, cfg.n_audio))
    mask = np.ones((batch, frames))
    mask[-1, frames - 2:] = 0.0
    y = (rng.random((batch, cfg.class_count)) < 0.3).astype(np.float64)
    drop_seed = int(rng.integers(2 ** 31))

    def f(p):
        z, ws = nv.video_model_forward(vis, aud, p, "train", np.random.default_rng(drop_seed),
                                       dropout_rate, mask, cfg.global_norm)
        loss = nx.bce_with_logits(y, z)
        return loss, nv.video_model_backward(nx.bce_with_logits_grad(y, z) / batch, ws, p)

    return nx.finite_diff_gradcheck(f, params, max_coords=max_coords, rng=np.random.default_rng(seed))


def mixture_error(seed: int, classes: int = 6, children: int = 3, T: float = 3.0) -> float:
    rng = np.random.default_rng(seed)
    y = (rng.random((2, classes)) < 0.4).astype(np.float64)
    z = {f"z{i}": 2.0 * rng.standard_normal((2, classes)) for i in range(children)}

    def f(p):
        total, _, grads = mx.mixture_loss(y, [p[f"z{i}"] for i in range(children)], None, T)
        return total, {f"z{i}": g for i, g in enumerate(grads)}

    return nx.finite_diff_gradcheck(f, z)


def mod_error(seed: int, classes: int = 6, shape=(4, 3), T: float = 3.0) -> float:
    rng = np.random.default_rng(seed)
    tree = mx.build_tree(shape, T)
    for node in tree.nodes():
        node.mix_weights = rng.dirichlet(np.ones(len(node.children)) * 2.0)
    n = len(tree.leaves())
    y = (rng.random((2, classes)) < 0.4).astype(np.float64)
    z = {f"z{i}": 2.0 * rng.standard_normal((2, classes)) for i in range(n)}

    def f(p):
        res = mx.mod_loss(y, tree, [p[f"z{i}"] for i in range(n)])
        return res.total, {f"z{i}": g for i, g in enumerate(res.leaf_grads)}

    return nx.finite_diff_gradcheck(f, z)


def run_suite(cfg: nv.ModelConfig, seeds) -> dict:
    """Max relative error per component over ``seeds``."""
    worst = {"nextvlad_pool": 0.0, "video_model": 0.0, "mixture_loss": 0.0, "mod_loss": 0.0}
    with nx.precision("test"):
        for s in seeds:
            worst["nextvlad_pool"] = max(worst["nextvlad_pool"], pool_error(cfg, s))
            worst["video_model"] = max(worst["video_model"], video_model_error(cfg, s))
            worst["mixture_loss"] = max(worst["mixture_loss"], mixture_error(s))
            worst["mod_loss"] = max(worst["mod_loss"], mod_error(s))
    return worst
