"""Dense numeric kernels shared by every model module.

Arrays are plain numpy ndarrays. Precision is a process-wide switch:
``"test"`` mode runs in float64 (gradient checks, oracle comparisons) and
``"train"`` mode in float32.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

BCE_EPS = 1e-6
NORM_EPS = 1e-12

_MODES = {"test": np.float64, "train": np.float32}
_mode = "train"


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def set_mode(mode: str) -> None:
    global _mode
    if mode not in _MODES:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    _mode = mode


def get_mode() -> str:
    return _mode


def float_dtype():
    return _MODES[_mode]


@contextlib.contextmanager
def precision(mode: str):
    prev = _mode
    set_mode(mode)
    try:
        yield
    finally:
        set_mode(prev)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise DomainError("log_softmax of an empty vector")
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z)
    # split on sign so exp never overflows
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(y, z, eps: float = BCE_EPS) -> float:
    """Binary cross entropy averaged over classes, probabilities clamped to [eps, 1-eps].

    A 2-D input is treated as a batch and the per-row losses are averaged.
    """
    return float(np.mean(bce_with_logits_rows(y, z, eps)))


def bce_with_logits_rows(y, z, eps: float = BCE_EPS) -> np.ndarray:
    """Per-row BCE (mean over the last axis)."""
    y = np.asarray(y)
    z = np.asarray(z)
    if y.shape != z.shape:
        raise ShapeError(f"bce length mismatch: labels {y.shape} vs logits {z.shape}")
    if eps <= 0:
        raise DomainError("eps must be positive")
    p = np.clip(sigmoid(z), eps, 1.0 - eps)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean(axis=-1)


def bce_with_logits_grad(y, z, eps: float = BCE_EPS) -> np.ndarray:
    """d(per-row BCE)/dz; zero where the clamp is active."""
    y = np.asarray(y)
    z = np.asarray(z)
    if y.shape != z.shape:
        raise ShapeError(f"bce length mismatch: labels {y.shape} vs logits {z.shape}")
    p = sigmoid(z)
    g = (p - y) / z.shape[-1]
    clamped = (p < eps) | (p > 1.0 - eps)
    return np.where(clamped, 0.0, g).astype(z.dtype, copy=False)


def l2_normalize(v, eps: float = NORM_EPS, axis: int = -1) -> np.ndarray:
    v = np.asarray(v)
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    return v / np.maximum(norm, eps)


def l2_normalize_backward(grad_out, v, eps: float = NORM_EPS, axis: int = -1) -> np.ndarray:
    """Gradient of ``l2_normalize`` wrt its input."""
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    u = v / denom
    proj = (u * grad_out).sum(axis=axis, keepdims=True)
    active = norm >= eps
    return np.where(active, (grad_out - u * proj) / denom, grad_out / eps)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names=None) -> None:
    """In-place bias-corrected Adam update of ``params``; increments ``state.step``."""
    names = list(params) if names is None else list(names)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in names:
        p, g = params[k], grads[k]
        if p.shape != g.shape:
            raise ShapeError(f"adam: param {k} has shape {p.shape}, grad {g.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def finite_diff_gradcheck(f, params, h: float = 1e-5, max_coords: int | None = None,
                          rng=None) -> float:
    """Compare analytic gradients against central differences.

    ``f(params) -> (value, grads)`` where ``params`` is a dict of arrays (or a
    single array) and ``grads`` mirrors it. Returns the max over checked
    coordinates of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    When ``max_coords`` is set, at most that many coordinates per tensor are
    sampled.
    """
    single = not isinstance(params, dict)
    if single:
        arr = np.array(params, dtype=np.float64)
        params = {"x": arr.reshape(arr.shape or (1,))}
        inner = f
        scalar_in = np.ndim(arr) == 0

        def f(p):
            x = p["x"].reshape(()) if scalar_in else p["x"]
            val, g = inner(x)
            return val, {"x": np.reshape(np.asarray(g, dtype=np.float64), p["x"].shape)}

    rng = np.random.default_rng(0) if rng is None else rng
    _, analytic = f(params)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = np.asarray(analytic[name]).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp, _ = f(params)
            flat[i] = orig - h
            fm, _ = f(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * h)
            a = float(a_flat[i])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst
