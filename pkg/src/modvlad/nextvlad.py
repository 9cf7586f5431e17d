"""NeXtVLAD pooling and the single-model video classifier, forward and backward.

All functions are batched: frames have shape ``(B, M, N)`` with an optional
``(B, M)`` mask so variable-length videos can share one padded batch. Masked
frames get zero attention and therefore never reach the pooled output or the
gradients. Parameters are flat dicts of arrays so the optimizer and the
checkpoint code can treat every tensor uniformly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx

POOL_TENSORS = ("expansion_w", "expansion_b", "attention_w", "attention_b",
                "assign_w", "assign_b", "centers")
HEAD_TENSORS = ("reduce_w", "reduce_b", "gate_w", "gate_b", "classifier_w", "classifier_b")
# tensors excluded from the L2 penalty
BIAS_TENSORS = {"expansion_b", "attention_b", "assign_b", "reduce_b", "gate_b", "classifier_b"}


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_visual: int = 16
    n_audio: int = 4
    expansion: int = 2
    groups: int = 2
    clusters: int = 4
    audio_groups: int = 2
    audio_clusters: int = 2
    hidden: int = 32
    class_count: int = 10
    global_norm: bool = False
    # () single model, (3,) one-layer mixture, (4, 3) two-layer MOD tree
    tree_shape: tuple = ()
    learnable_weights: bool = False

    def __post_init__(self):
        self.tree_shape = tuple(int(x) for x in self.tree_shape)

    def validate(self) -> None:
        for name, n, g in (("visual", self.n_visual, self.groups),
                           ("audio", self.n_audio, self.audio_groups)):
            if n < 1 or g < 1:
                raise ConfigError(f"{name}: feature dim and group count must be positive")
            if (self.expansion * n) % g:
                raise ConfigError(
                    f"{name}: expanded dim {self.expansion}*{n} is not divisible by {g} groups"
                )
        if self.expansion < 1 or self.clusters < 1 or self.audio_clusters < 1:
            raise ConfigError("expansion and cluster counts must be >= 1")
        if self.hidden < 1:
            raise ConfigError("hidden size must be positive")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if len(self.tree_shape) > 2 or any(n < 1 for n in self.tree_shape):
            raise ConfigError(f"tree_shape {self.tree_shape} must have depth <= 2 and positive fan-out")

    def pooled_dim(self) -> int:
        dv = self.expansion * self.n_visual // self.groups
        da = self.expansion * self.n_audio // self.audio_groups
        return self.clusters * dv + self.audio_clusters * da

    def as_dict(self) -> dict:
        d = asdict(self)
        d["tree_shape"] = list(self.tree_shape)
        return d

    @property
    def num_leaves(self) -> int:
        n = 1
        for k in self.tree_shape:
            n *= k
        return n


def _gauss(rng, shape, std, dtype):
    return (std * rng.standard_normal(shape)).astype(dtype)


def init_pool_params(rng, n_input: int, expansion: int, groups: int, clusters: int,
                     dtype=None) -> dict:
    dtype = nx.float_dtype() if dtype is None else dtype
    L = expansion * n_input
    if L % groups:
        raise ConfigError(f"expanded dim {L} is not divisible by {groups} groups")
    D = L // groups
    return {
        "expansion_w": _gauss(rng, (n_input, L), 1.0 / np.sqrt(n_input), dtype),
        "expansion_b": np.zeros(L, dtype),
        "attention_w": _gauss(rng, (L, groups), 1.0 / np.sqrt(L), dtype),
        "attention_b": np.zeros(groups, dtype),
        "assign_w": _gauss(rng, (L, groups * clusters), 1.0 / np.sqrt(L), dtype),
        "assign_b": np.zeros(groups * clusters, dtype),
        "centers": _gauss(rng, (clusters, D), 1.0, dtype),
    }


def init_head_params(rng, pooled_dim: int, hidden: int, class_count: int, dtype=None) -> dict:
    dtype = nx.float_dtype() if dtype is None else dtype
    return {
        "reduce_w": _gauss(rng, (pooled_dim, hidden), 1.0 / np.sqrt(pooled_dim), dtype),
        "reduce_b": np.zeros(hidden, dtype),
        "gate_w": _gauss(rng, (hidden, hidden), 1.0 / np.sqrt(hidden), dtype),
        "gate_b": np.zeros(hidden, dtype),
        "classifier_w": _gauss(rng, (hidden, class_count), 1.0 / np.sqrt(hidden), dtype),
        "classifier_b": np.zeros(class_count, dtype),
    }


def init_video_model(cfg: ModelConfig, rng, dtype=None) -> dict:
    """Parameters of one leaf model, keyed ``pool_v/*``, ``pool_a/*`` and ``head/*``."""
    cfg.validate()
    params = {}
    for prefix, sub in (
        ("pool_v/", init_pool_params(rng, cfg.n_visual, cfg.expansion, cfg.groups, cfg.clusters, dtype)),
        ("pool_a/", init_pool_params(rng, cfg.n_audio, cfg.expansion, cfg.audio_groups,
                                     cfg.audio_clusters, dtype)),
        ("head/", init_head_params(rng, cfg.pooled_dim(), cfg.hidden, cfg.class_count, dtype)),
    ):
        params.update({prefix + k: v for k, v in sub.items()})
    return params


def sub_params(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def is_weight(name: str) -> bool:
    """True for tensors that receive the L2 penalty (weights and centers, not biases)."""
    return name.rsplit("/", 1)[-1] not in BIAS_TENSORS and "mix_logits" not in name


@dataclass
class PoolWorkspace:
    frames: np.ndarray
    mask: np.ndarray
    xdot: np.ndarray          # (B, M, L)
    attention_raw: np.ndarray  # (B, M, G) sigmoid before masking
    attention: np.ndarray      # (B, M, G)
    assignment: np.ndarray     # (B, M, G, K)
    vlad: np.ndarray           # (B, K, D) before normalization
    normalized: np.ndarray     # (B, K*D) pooled output
    intra: np.ndarray          # (B, K*D) after intra-normalization only
    global_norm: bool = False

    @property
    def group_slices(self) -> np.ndarray:
        B, M, L = self.xdot.shape
        G = self.attention.shape[-1]
        return self.xdot.reshape(B, M, G, L // G)


def nextvlad_pool_forward(frames, params: dict, mask=None, global_norm: bool = False):
    """Pool a batch of frame matrices into intra-normalized VLAD vectors.

    Returns ``(pooled, workspace)``; ``pooled`` has shape ``(B, K*D)`` (or
    ``(K*D,)`` for a single ``(M, N)`` input) with ``D = L / G``.
    """
    We, be = params["expansion_w"], params["expansion_b"]
    Wa, ba = params["attention_w"], params["attention_b"]
    Ws, bs = params["assign_w"], params["assign_b"]
    centers = params["centers"]
    single = np.ndim(frames) == 2
    X = np.asarray(frames, dtype=We.dtype)
    if single:
        X = X[None]
    B, M, N = X.shape
    if N != We.shape[0]:
        raise nx.ShapeError(f"frames have {N} features, expansion expects {We.shape[0]}")
    if M < 1:
        raise nx.ShapeError("need at least one frame")
    mask = np.ones((B, M), dtype=We.dtype) if mask is None else np.asarray(mask, dtype=We.dtype)
    G = Wa.shape[1]
    K, D = centers.shape
    L = We.shape[1]

    xdot = nx.matmul(X, We) + be
    a_raw = nx.sigmoid(nx.matmul(xdot, Wa) + ba)
    a = a_raw * mask[..., None]
    s = nx.softmax((nx.matmul(xdot, Ws) + bs).reshape(B, M, G, K), axis=-1)
    w = (a[..., None] * s).reshape(B, M * G, K)
    xt = xdot.reshape(B, M * G, D)
    y = nx.matmul(w.transpose(0, 2, 1), xt) - centers[None] * w.sum(axis=1)[..., None]
    intra = nx.l2_normalize(y, axis=-1).reshape(B, K * D)
    out = nx.l2_normalize(intra, axis=-1) if global_norm else intra
    ws = PoolWorkspace(X, mask, xdot, a_raw, a, s.reshape(B, M, G, K), y, out, intra, global_norm)
    return (out[0] if single else out), ws


def nextvlad_pool_backward(grad_out, ws: PoolWorkspace, params: dict):
    """Gradients of the pooling output wrt every pool tensor and the input frames.

    Returns ``(grads, dframes)``.
    """
    X, mask, xdot, s = ws.frames, ws.mask, ws.xdot, ws.assignment
    B, M, N = X.shape
    G, K = s.shape[2], s.shape[3]
    L = xdot.shape[2]
    D = L // G
    grad_out = np.asarray(grad_out, dtype=xdot.dtype)
    if grad_out.ndim == 1:
        grad_out = grad_out[None]
    if grad_out.shape != (B, K * D) or params["centers"].shape != (K, D):
        raise ContractError(
            f"stale workspace: grad {grad_out.shape}, workspace expects {(B, K * D)}, "
            f"centers {params['centers'].shape}"
        )
    Wa, Ws, We, centers = params["attention_w"], params["assign_w"], params["expansion_w"], params["centers"]

    y = ws.vlad
    if ws.global_norm:
        grad_out = nx.l2_normalize_backward(grad_out, ws.intra, axis=-1)
    dy = nx.l2_normalize_backward(grad_out.reshape(B, K, D), y, axis=-1)

    a, a_raw = ws.attention, ws.attention_raw
    w = (a[..., None] * s).reshape(B, M * G, K)
    xt = xdot.reshape(B, M * G, D)
    dw = nx.matmul(xt, dy.transpose(0, 2, 1)) - (dy * centers[None]).sum(-1)[:, None, :]
    dxt = nx.matmul(w, dy)
    dcenters = -(dy * w.sum(axis=1)[..., None]).sum(0)

    dw = dw.reshape(B, M, G, K)
    da = (dw * s).sum(-1)
    ds = dw * a[..., None]
    dA = da * a_raw * (1.0 - a_raw) * mask[..., None]
    dS = (s * (ds - (ds * s).sum(-1, keepdims=True))).reshape(B, M, G * K)
    dxdot = dxt.reshape(B, M, L) + nx.matmul(dA, Wa.T) + nx.matmul(dS, Ws.T)

    xd2 = xdot.reshape(B * M, L)
    grads = {
        "attention_w": nx.matmul(xd2.T, dA.reshape(B * M, G)),
        "attention_b": dA.sum((0, 1)),
        "assign_w": nx.matmul(xd2.T, dS.reshape(B * M, G * K)),
        "assign_b": dS.sum((0, 1)),
        "expansion_w": nx.matmul(X.reshape(B * M, N).T, dxdot.reshape(B * M, L)),
        "expansion_b": dxdot.sum((0, 1)),
        "centers": dcenters,
    }
    dframes = nx.matmul(dxdot, We.T)
    return grads, dframes


@dataclass
class ModelWorkspace:
    pool_v: PoolWorkspace
    pool_a: PoolWorkspace
    keep: np.ndarray | None   # dropout keep mask, scaled
    h0d: np.ndarray
    h: np.ndarray
    gate: np.ndarray
    hg: np.ndarray
    split: int
    single: bool


def video_model_forward(visual, audio, params: dict, mode: str = "eval", rng=None,
                        dropout_rate: float = 0.0, mask=None, global_norm: bool = False):
    """Logits of one leaf model for a batch of videos (or a single video).

    Dual pooling, concat, dropout (train only, inverted scaling), FC to the
    hidden size, context gating, logistic classifier.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    single = np.ndim(visual) == 2
    if np.shape(visual)[-2] != np.shape(audio)[-2]:
        raise nx.ShapeError(
            f"visual has {np.shape(visual)[-2]} frames but audio has {np.shape(audio)[-2]}"
        )
    pv, ws_v = nextvlad_pool_forward(visual, sub_params(params, "pool_v/"), mask, global_norm)
    pa, ws_a = nextvlad_pool_forward(audio, sub_params(params, "pool_a/"), mask, global_norm)
    if single:
        pv, pa = pv[None], pa[None]
    h0 = np.concatenate([pv, pa], axis=1)
    keep = None
    if mode == "train" and dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = (rng.random(h0.shape) >= dropout_rate).astype(h0.dtype) / (1.0 - dropout_rate)
        h0d = h0 * keep
    else:
        h0d = h0
    h = nx.matmul(h0d, params["head/reduce_w"]) + params["head/reduce_b"]
    gate = nx.sigmoid(nx.matmul(h, params["head/gate_w"]) + params["head/gate_b"])
    hg = gate * h
    z = nx.matmul(hg, params["head/classifier_w"]) + params["head/classifier_b"]
    ws = ModelWorkspace(ws_v, ws_a, keep, h0d, h, gate, hg, pv.shape[1], single)
    return (z[0] if single else z), ws


def video_model_backward(dz, ws: ModelWorkspace, params: dict) -> dict:
    dz = np.asarray(dz, dtype=ws.h.dtype)
    if dz.ndim == 1:
        dz = dz[None]
    Wc, Wg, Wr = params["head/classifier_w"], params["head/gate_w"], params["head/reduce_w"]
    grads = {
        "head/classifier_w": nx.matmul(ws.hg.T, dz),
        "head/classifier_b": dz.sum(0),
    }
    dhg = nx.matmul(dz, Wc.T)
    dgate = dhg * ws.h
    dh = dhg * ws.gate
    dG = dgate * ws.gate * (1.0 - ws.gate)
    grads["head/gate_w"] = nx.matmul(ws.h.T, dG)
    grads["head/gate_b"] = dG.sum(0)
    dh = dh + nx.matmul(dG, Wg.T)
    grads["head/reduce_w"] = nx.matmul(ws.h0d.T, dh)
    grads["head/reduce_b"] = dh.sum(0)
    dh0 = nx.matmul(dh, Wr.T)
    if ws.keep is not None:
        dh0 = dh0 * ws.keep
    gv, _ = nextvlad_pool_backward(dh0[:, :ws.split], ws.pool_v, sub_params(params, "pool_v/"))
    ga, _ = nextvlad_pool_backward(dh0[:, ws.split:], ws.pool_a, sub_params(params, "pool_a/"))
    grads.update({"pool_v/" + k: v for k, v in gv.items()})
    grads.update({"pool_a/" + k: v for k, v in ga.items()})
    return grads


def dummy_segment_predict(video_logits, n_segments: int) -> np.ndarray:
    """Every segment of a video inherits the video-level probabilities."""
    p = nx.sigmoid(np.asarray(video_logits))
    return np.repeat(p[None], n_segments, axis=0)
