"""Fine-tuning with group-averaged gradient updates."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import GroupAssignment
from .losses import (ComponentLoss, LossWeights, cross_entropy, inter_group_loss, intra_group_loss,
                     metric_loss, total_loss)
from .network import Network, backward, forward, snap

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iteration", "L_class", "L_intra", "L_inter", "L_triplet", "L_total", "lr")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class FineTuneConfig:
    lr: float = 0.01
    decay_rate: float = 0.1
    decay_step: int = 1000
    max_iters: int = 2000
    weights: LossWeights = field(default_factory=LossWeights)
    # clusterable-layer positions (0-based among clusterable layers); None = all
    cluster_layers: tuple[int, ...] | None = None
    embedding: str = "penultimate"  # or "logits"
    regularize_on: str = "kshot"  # or "clustering"

    def __post_init__(self):
        if self.lr <= 0 or self.decay_rate <= 0:
            raise ValueError("learning rates must be > 0")
        if self.max_iters < 1 or self.decay_step < 1:
            raise ValueError("max_iters and decay_step must be >= 1")
        if self.embedding not in ("penultimate", "logits"):
            raise ValueError("embedding must be penultimate or logits")
        if self.regularize_on not in ("kshot", "clustering"):
            raise ValueError("regularize_on must be kshot or clustering")

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.decay_rate ** (iteration // self.decay_step)


@dataclass
class FineTuneResult:
    net: Network
    trace: list[dict]
    accuracy: float


def average_group_gradients(grads, assignment: GroupAssignment):
    """Replace every grouped filter's gradient (weights and bias together) by its group mean."""
    out = [{k: v.copy() for k, v in g.items()} for g in grads]
    for layer, lg in assignment.layers.items():
        g = out[layer]
        if "W" not in g or g["W"].shape[-1] != lg.n_filters:
            raise ValueError(f"layer {layer}: gradients do not match a {lg.n_filters}-filter assignment")
        for members in lg.groups:
            if len(members) < 2:
                continue
            for name, arr in g.items():
                # one mean per group, written to every member
                arr[..., members] = arr[..., members].mean(axis=-1, keepdims=True)
    return out


def sgd_step(net: Network, grads, lr: float) -> Network:
    """W <- W - lr * dW with the step snapped to the parameter lattice."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    params = []
    for i, (p, g) in enumerate(zip(net.params, grads)):
        new = {}
        for name, w in p.items():
            if not np.all(np.isfinite(g[name])):
                raise DivergenceError(f"non-finite gradient in layer {i} ({name})")
            new[name] = w - snap(lr * g[name])
        params.append(new)
    return net.with_params(params)


def embedding_index(net: Network, which: str) -> int:
    return len(net.layers) - 1 if which == "logits" else net.head - 1


def objective(net: Network, x, y, assignment: GroupAssignment | None, w: LossWeights,
              embedding: str = "penultimate", aux_batch=None):
    """Forward pass plus every enabled loss term; returns ``(parts, total, param_grads)``.

    Disabled terms (zero weight, or no assignment for the group terms) are
    reported as 0 and never evaluated. With ``aux_batch`` the group terms are
    measured on that batch instead of ``x``.
    """
    logits, rec = forward(net, x)
    ce, g_logits = cross_entropy(logits, y)
    parts = {"class": ComponentLoss(ce, {len(net.layers) - 1: g_logits})}
    if w.gamma_triplet > 0:
        idx = embedding_index(net, embedding)
        emb = rec.outputs[idx] if idx >= 0 else rec.batch
        val, g = metric_loss(emb, y, w)
        parts["triplet"] = ComponentLoss(val, {idx: g} if idx >= 0 else {})
    group_parts = {}
    aux_rec = rec
    if assignment is not None and (w.alpha_intra > 0 or w.beta_inter > 0):
        if aux_batch is not None:
            _, aux_rec = forward(net, aux_batch)
        if w.alpha_intra > 0:
            group_parts["intra"] = intra_group_loss(aux_rec, assignment)
        if w.beta_inter > 0:
            group_parts["inter"] = inter_group_loss(aux_rec, assignment)
    if aux_rec is rec:
        parts.update(group_parts)
        total = total_loss(parts, w)
        grads = backward(net, rec, None, total.grads)
    else:
        total = total_loss(parts, w)
        aux_total = total_loss(group_parts, w)
        grads = backward(net, rec, None, total.grads)
        aux_grads = backward(net, aux_rec, None, aux_total.grads)
        grads = [{k: a[k] + b[k] for k in a} for a, b in zip(grads, aux_grads)]
        parts.update(group_parts)
        total = ComponentLoss(total.value + aux_total.value, {})
    return parts, total, grads


def fine_tune(net: Network, assignment: GroupAssignment | None, kshot_data, val_data,
              cfg: FineTuneConfig, aux_batch=None) -> FineTuneResult:
    """Full-batch SGD on the k-shot data; grouped layers share one averaged update per group."""
    x, y = kshot_data.images, kshot_data.labels
    if len(y) == 0:
        raise ValueError("k-shot data is empty")
    if net.output_shape[-1] < int(np.max(y)) + 1:
        raise ValueError("head has fewer outputs than target classes")
    if assignment is not None:
        assignment.check(net)
    if cfg.regularize_on == "clustering" and aux_batch is None:
        raise ValueError("regularize_on=clustering needs the clustering batch")
    aux = aux_batch if cfg.regularize_on == "clustering" else None
    net = net.with_params([{k: snap(v) for k, v in p.items()} for p in net.params])
    trace = []
    for it in range(cfg.max_iters):
        lr = cfg.lr_at(it)
        parts, total, grads = objective(net, x, y, assignment, cfg.weights, cfg.embedding, aux)
        if not np.isfinite(total.value):
            raise DivergenceError(f"loss is {total.value} at iteration {it}", iteration=it)
        trace.append({
            "iteration": it,
            "L_class": parts["class"].value,
            "L_intra": parts["intra"].value if "intra" in parts else 0.0,
            "L_inter": parts["inter"].value if "inter" in parts else 0.0,
            "L_triplet": parts["triplet"].value if "triplet" in parts else 0.0,
            "L_total": total.value,
            "lr": lr,
        })
        if assignment is not None:
            grads = average_group_gradients(grads, assignment)
        try:
            net = sgd_step(net, grads, lr)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at iteration {it}", iteration=it) from exc
    acc = evaluate(net, val_data) if val_data is not None else float("nan")
    return FineTuneResult(net, trace, acc)


def predict(net: Network, images, chunk: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(images), chunk):
        logits, _ = forward(net, images[s:s + chunk])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out)


def evaluate(net: Network, dataset) -> float:
    """Fraction of samples whose arg-max output equals the label."""
    if len(dataset.labels) == 0:
        raise ValueError("dataset is empty")
    return float(np.mean(predict(net, dataset.images) == dataset.labels))


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(TRACE_FIELDS)
        for row in trace:
            wr.writerow([row["iteration"]] + [repr(float(row[k])) for k in TRACE_FIELDS[1:]])
