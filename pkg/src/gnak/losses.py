"""Hybrid k-shot objective.

Each component returns a :class:`ComponentLoss` whose gradient is expressed
on recorded activations (record index -> dL/d output), so the weighted sum
can be pushed through a single backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import GroupAssignment, profile_grad_to_activation, profile_matrix
from .network import ActivationRecord

DISTANCES = ("squared-euclidean", "total-variation")


@dataclass(frozen=True)
class LossWeights:
    alpha_intra: float = 0.1
    beta_inter: float = 0.01
    gamma_triplet: float = 1.0
    margin: float = 1.0
    distance_kind: str = "squared-euclidean"
    # "triplet", "margin", or "auto" (margin when no class has two samples)
    metric_loss: str = "auto"

    def __post_init__(self):
        for name in ("alpha_intra", "beta_inter", "gamma_triplet"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not np.isfinite(self.margin) or self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.distance_kind not in DISTANCES:
            raise ValueError(f"distance_kind must be one of {DISTANCES}")
        if self.metric_loss not in ("auto", "triplet", "margin"):
            raise ValueError("metric_loss must be auto, triplet or margin")


@dataclass
class ComponentLoss:
    value: float
    grads: dict[int, np.ndarray] = field(default_factory=dict)


# --- classification ----------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must be {b} ints in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


# --- metric losses -------------------------------------------------------------------

def pairwise_distances(emb: np.ndarray, kind: str) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    if kind == "squared-euclidean":
        return (diff**2).sum(axis=-1)
    return np.abs(diff).sum(axis=-1)


def _distance_backprop(emb: np.ndarray, coef: np.ndarray, kind: str) -> np.ndarray:
    """Gradient of sum_ij coef[i, j] * d(e_i, e_j) with respect to the embeddings."""
    s = coef + coef.T
    diff = emb[:, None, :] - emb[None, :, :]
    dd = 2.0 * diff if kind == "squared-euclidean" else np.sign(diff)
    return (s[:, :, None] * dd).sum(axis=1)


def triplet_loss(embeddings: np.ndarray, labels, w: LossWeights) -> tuple[float, np.ndarray]:
    """Sum of [d(a, p) - d(a, n) + margin]_+ over every valid (anchor, positive, negative)."""
    emb = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    labels = np.asarray(labels)
    d = pairwise_distances(emb, w.distance_kind)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    valid = pos[:, :, None] & neg[:, None, :]
    if not valid.any():
        return 0.0, np.zeros_like(emb).reshape(np.shape(embeddings))
    t = d[:, :, None] - d[:, None, :] + w.margin
    active = valid & (t > 0)
    loss = float(t[active].sum())
    coef = active.sum(axis=2) - active.sum(axis=1)
    return loss, _distance_backprop(emb, coef.astype(np.float64), w.distance_kind).reshape(np.shape(embeddings))


def margin_loss(embeddings: np.ndarray, labels, w: LossWeights) -> tuple[float, np.ndarray]:
    """Sum of [margin - d(x_i, x_k)]_+ over unordered cross-class pairs."""
    emb = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    labels = np.asarray(labels)
    d = pairwise_distances(emb, w.distance_kind)
    cross = np.triu(labels[:, None] != labels[None, :], k=1)
    t = w.margin - d
    active = cross & (t > 0)
    loss = float(t[active].sum())
    return loss, _distance_backprop(emb, -active.astype(np.float64), w.distance_kind).reshape(np.shape(embeddings))


def metric_loss(embeddings, labels, w: LossWeights) -> tuple[float, np.ndarray]:
    kind = w.metric_loss
    if kind == "auto":
        _, counts = np.unique(labels, return_counts=True)
        kind = "triplet" if counts.max() > 1 else "margin"
    return (triplet_loss if kind == "triplet" else margin_loss)(embeddings, labels, w)


# --- group regularizers ----------------------------------------------------------------

def intra_group_loss(record: ActivationRecord, assignment: GroupAssignment) -> ComponentLoss:
    """Sum over groups of ||A_i - A_j||_2 for every unordered member pair."""
    total = 0.0
    grads = {}
    for layer, lg in assignment.layers.items():
        p = profile_matrix(record, layer)
        gp = np.zeros_like(p)
        for members in lg.groups:
            if len(members) < 2:
                continue
            m = p[:, members]
            diff = m[:, :, None] - m[:, None, :]  # (B, g, g)
            norms = np.sqrt((diff**2).sum(axis=0))
            iu = np.triu_indices(len(members), k=1)
            total += float(norms[iu].sum())
            # subgradient 0 where two profiles coincide
            unit = np.divide(diff, norms, out=np.zeros_like(diff), where=norms > 0)
            gp[:, members] += unit.sum(axis=2)
        grads[record.activation_index(layer)] = profile_grad_to_activation(record, layer, gp)
    return ComponentLoss(total, grads)


def inter_group_loss(record: ActivationRecord, assignment: GroupAssignment) -> ComponentLoss:
    """Sum over distinct group pairs (i < j) of ||M_i^T M_j||_F^2."""
    total = 0.0
    grads = {}
    for layer, lg in assignment.layers.items():
        p = profile_matrix(record, layer)
        gram = p.T @ p
        cross = (lg.labels[:, None] != lg.labels[None, :]).astype(np.float64)
        # each unordered group pair appears twice in the full mask
        total += 0.5 * float((cross * gram**2).sum())
        gp = 2.0 * p @ (cross * gram)
        grads[record.activation_index(layer)] = profile_grad_to_activation(record, layer, gp)
    return ComponentLoss(total, grads)


def total_loss(parts: dict[str, ComponentLoss], w: LossWeights) -> ComponentLoss:
    """L = class + alpha*intra + beta*inter + gamma*triplet; gradients combine the same way."""
    coef = {"class": 1.0, "intra": w.alpha_intra, "inter": w.beta_inter, "triplet": w.gamma_triplet}
    value = 0.0
    grads: dict[int, np.ndarray] = {}
    for name, part in parts.items():
        c = coef[name]
        value += c * part.value
        if c == 0.0:
            continue
        for idx, g in part.grads.items():
            grads[idx] = grads[idx] + c * g if idx in grads else c * g
    return ComponentLoss(value, grads)
