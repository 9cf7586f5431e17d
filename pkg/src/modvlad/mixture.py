"""Logit mixtures with online distillation.

A :class:`MixtureNode` tree mixes leaf logits bottom-up (``z_node = sum_m
w_m z_m``). The loss of a node is its own label BCE, plus the losses of its
children, plus ``T**2 * sum_m KL(soft(z_node, T) || soft(z_m, T))`` when
``T > 0``. A depth-1 tree gives the MixNeXtVLAD objective; a depth-2 tree
(4 x 3 leaves) gives the MOD objective with 17 BCE terms.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx


class ConfigError(ValueError):
    pass


@dataclass
class DistillConfig:
    T: float = 0.0

    def __post_init__(self):
        if self.T < 0:
            raise ConfigError("temperature must be >= 0")

    @property
    def enabled(self) -> bool:
        return self.T > 0


@dataclass
class MixtureNode:
    children: list
    mix_weights: np.ndarray | None = None
    T: float = 0.0
    path: str = "root"

    def __post_init__(self):
        if not self.children:
            raise ConfigError(f"{self.path}: mixture node needs at least one child")
        if self.mix_weights is None:
            self.mix_weights = np.full(len(self.children), 1.0 / len(self.children))
        self.mix_weights = np.asarray(self.mix_weights, dtype=np.float64)
        if self.mix_weights.shape != (len(self.children),):
            raise ConfigError(f"{self.path}: {len(self.children)} children but weights {self.mix_weights.shape}")
        if np.any(self.mix_weights < 0) or abs(self.mix_weights.sum() - 1.0) > 1e-9:
            raise ConfigError(f"{self.path}: mix weights must be non-negative and sum to 1")

    def depth(self) -> int:
        return 1 + max((c.depth() if isinstance(c, MixtureNode) else 0) for c in self.children)

    def leaves(self) -> list:
        out = []
        for c in self.children:
            out.extend(c.leaves() if isinstance(c, MixtureNode) else [c])
        return out

    def nodes(self) -> list:
        """Inner nodes, pre-order."""
        out = [self]
        for c in self.children:
            if isinstance(c, MixtureNode):
                out.extend(c.nodes())
        return out


def build_tree(tree_shape, T: float = 0.0):
    """Uniform-weight tree for ``tree_shape`` (e.g. ``(3,)`` or ``(4, 3)``); ``None`` for ``()``."""
    tree_shape = tuple(tree_shape)
    if not tree_shape:
        return None
    if len(tree_shape) > 2:
        raise ConfigError(f"tree depth {len(tree_shape)} > 2 is not supported")
    counter = iter(range(10 ** 9))

    def make(level, path):
        n = tree_shape[level]
        if level == len(tree_shape) - 1:
            kids = [next(counter) for _ in range(n)]
        else:
            kids = [make(level + 1, f"{path}/{i}") for i in range(n)]
        return MixtureNode(kids, T=T, path=path)

    return make(0, "root")


def leaf_path(tree, leaf: int) -> str:
    if tree is None:
        return "root"

    def find(node):
        for i, c in enumerate(node.children):
            if isinstance(c, MixtureNode):
                hit = find(c)
                if hit:
                    return hit
            elif c == leaf:
                return f"{node.path}/{i}"
        return None

    return find(tree)


def mix_logits(child_logits, weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if len(child_logits) != len(weights):
        raise nx.ShapeError(f"{len(child_logits)} children but {len(weights)} weights")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("mixing weights must sum to 1")
    shape = np.shape(child_logits[0])
    for z in child_logits:
        if np.shape(z) != shape:
            raise nx.ShapeError(f"child logits shape mismatch: {np.shape(z)} vs {shape}")
    out = weights[0] * np.asarray(child_logits[0])
    for w, z in zip(weights[1:], child_logits[1:]):
        out = out + w * np.asarray(z)
    return out


def soften(z, T: float) -> np.ndarray:
    if T <= 0:
        raise nx.DomainError("soften needs T > 0; T = 0 means distillation is disabled")
    return nx.softmax(np.asarray(z) / T, axis=-1)


def kl_softened(z_parent, z_child, T: float):
    """Per-row ``KL(soft(z_parent, T) || soft(z_child, T))`` and its gradients.

    Returns ``(kl, d_parent, d_child)`` with gradients of the per-row KL.
    """
    zp, zc = np.asarray(z_parent), np.asarray(z_child)
    if zp.shape != zc.shape:
        raise nx.ShapeError(f"parent logits {zp.shape} vs child logits {zc.shape}")
    lp = nx.log_softmax(zp / T, axis=-1)
    lq = nx.log_softmax(zc / T, axis=-1)
    p, q = np.exp(lp), np.exp(lq)
    diff = lp - lq
    kl = (p * diff).sum(-1)
    d_parent = p * (diff - kl[..., None]) / T
    d_child = (q - p) / T
    return np.maximum(kl, 0.0), d_parent, d_child


def distill_term(z_parent, z_children, T: float) -> float:
    """``T**2 * sum_m KL(soft(parent) || soft(child_m))``, averaged over batch rows."""
    total = 0.0
    for zc in z_children:
        kl, _, _ = kl_softened(z_parent, zc, T)
        total += float(np.mean(kl))
    return T * T * total


@dataclass
class NodeParts:
    label_loss: float = 0.0
    distill_loss: float = 0.0   # T^2 KL(parent || this node); 0 at the root


@dataclass
class LossResult:
    total: float
    parts: dict = field(default_factory=dict)      # path -> NodeParts
    leaf_grads: list = field(default_factory=list)  # d total / d leaf logits
    weight_grads: dict = field(default_factory=dict)  # path -> d total / d mix_weights
    node_logits: dict = field(default_factory=dict)


def _validate(tree: MixtureNode, n_leaves: int) -> None:
    if tree.depth() > 2:
        raise ConfigError(f"mixture tree depth {tree.depth()} exceeds 2")
    leaves = tree.leaves()
    if sorted(leaves) != list(range(n_leaves)):
        raise ConfigError(f"tree leaves {leaves} do not cover the {n_leaves} leaf logit sets")


def mod_loss(y, tree: MixtureNode, leaf_logits, stop_grad_teacher: bool = False,
             label_scale: float = 1.0) -> LossResult:
    """Layered distillation loss over a mixture tree plus all gradients.

    ``leaf_logits`` holds one ``(C,)`` or ``(B, C)`` array per leaf; batch rows
    are averaged. Gradients flow into teacher and student logits unless
    ``stop_grad_teacher`` is set. ``label_scale`` multiplies every BCE term in
    the total (``class_count`` turns the class mean into a class sum); the
    reported per-node label losses stay class means.
    """
    _validate(tree, len(leaf_logits))
    y = np.asarray(y)
    z0 = np.asarray(leaf_logits[0])
    batched = z0.ndim == 2
    B = z0.shape[0] if batched else 1

    logits, grads, parts = {}, {}, {}

    def child_key(node, i):
        c = node.children[i]
        return c.path if isinstance(c, MixtureNode) else ("leaf", c)

    def forward(node):
        zs = []
        for i, c in enumerate(node.children):
            if isinstance(c, MixtureNode):
                zs.append(forward(c))
            else:
                z = np.asarray(leaf_logits[c])
                logits[("leaf", c)] = z
                zs.append(z)
        z = mix_logits(zs, node.mix_weights)
        logits[node.path] = z
        return z

    forward(tree)

    terms = []
    for key, z in logits.items():
        if z.shape != y.shape:
            raise nx.ShapeError(f"labels {y.shape} vs logits {z.shape}")
        rows = nx.bce_with_logits_rows(y, z)
        parts[key] = NodeParts(label_loss=float(rows.mean()))
        terms.append(label_scale * float(rows.sum()) / B)
        grads[key] = label_scale * nx.bce_with_logits_grad(y, z).astype(np.float64) / B

    for node in tree.nodes():
        T = node.T
        if T < 0:
            raise ConfigError(f"{node.path}: temperature must be >= 0")
        if T > 0:
            zp = logits[node.path]
            for i in range(len(node.children)):
                key = child_key(node, i)
                kl, dp, dc = kl_softened(zp, logits[key], T)
                term = T * T * float(kl.sum()) / B
                terms.append(term)
                parts[key].distill_loss = term
                if not stop_grad_teacher:
                    grads[node.path] = grads[node.path] + T * T * dp / B
                grads[key] = grads[key] + T * T * dc / B

    # fsum: the total does not depend on term order
    total = math.fsum(terms)
    weight_grads = {}
    for node in tree.nodes():  # pre-order: parents before children
        g = grads[node.path]
        wg = np.zeros(len(node.children))
        for i, w in enumerate(node.mix_weights):
            key = child_key(node, i)
            wg[i] = float((g * logits[key]).sum())
            grads[key] = grads[key] + w * g
        weight_grads[node.path] = wg

    leaf_grads = [grads[("leaf", i)] for i in range(len(leaf_logits))]
    named_parts = {}
    for key, p in parts.items():
        name = key if isinstance(key, str) else leaf_path(tree, key[1])
        named_parts[name] = p
    return LossResult(total, named_parts, leaf_grads, weight_grads,
                      {k: v for k, v in logits.items() if isinstance(k, str)})


def mixture_loss(y, child_logits, weights=None, T: float = 0.0, stop_grad_teacher: bool = False):
    """One-layer mixture objective. Returns ``(total, parts, leaf_grads)``.

    ``parts`` has ``child_label`` (list), ``mixture_label`` and ``distill``.
    """
    node = MixtureNode(list(range(len(child_logits))), weights, T)
    res = mod_loss(y, node, child_logits, stop_grad_teacher)
    kids = [res.parts[f"root/{i}"] for i in range(len(child_logits))]
    parts = {
        "child_label": [k.label_loss for k in kids],
        "mixture_label": res.parts["root"].label_loss,
        "distill": sum(k.distill_loss for k in kids),
    }
    return res.total, parts, res.leaf_grads


def softmax_weights_grad(weights, dweights) -> np.ndarray:
    """Chain ``d/d weights`` through ``weights = softmax(theta)``."""
    w = np.asarray(weights)
    g = np.asarray(dweights)
    return w * (g - (w * g).sum())


class DiagnosticLog:
    """Per-step loss log: ``step,node_path,label_loss,distill_loss,reg_loss``."""

    HEADER = ["step", "node_path", "label_loss", "distill_loss", "reg_loss"]

    def __init__(self, path=None):
        self.rows = []
        self.path = path
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(self.HEADER)

    def record(self, step: int, parts: dict, reg: dict | None = None) -> None:
        reg = reg or {}
        for path in sorted(parts):
            p = parts[path]
            row = [step, path, f"{p.label_loss:.9g}", f"{p.distill_loss:.9g}",
                   f"{reg.get(path, 0.0):.9g}"]
            self.rows.append(row)
            if self._fh:
                self._writer.writerow(row)

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def read_diagnostic_log(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DiagnosticLog.HEADER:
            raise ValueError(f"unexpected diagnostic log header {reader.fieldnames}")
        return [
            {"step": int(r["step"]), "node_path": r["node_path"],
             "label_loss": float(r["label_loss"]), "distill_loss": float(r["distill_loss"]),
             "reg_loss": float(r["reg_loss"])}
            for r in reader
        ]
