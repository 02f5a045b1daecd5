"""Grouping neurons by activations.

Every filter of a layer gets an activation profile over a clustering batch
(one value per sample; conv maps are reduced by their spatial mean), and the
profiles of each layer are partitioned with k-means.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass

import numpy as np

from .network import ActivationRecord, Network, forward


class InvalidGroupCount(ValueError):
    """Requested group count is impossible for a layer (k > number of filters)."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


# --- activation profiles ---------------------------------------------------------

def profile_matrix(record: ActivationRecord, layer: int) -> np.ndarray:
    """(B, N_f) matrix whose column ``i`` is filter ``i``'s activation profile."""
    act = record.outputs[record.activation_index(layer)]
    if act.ndim == 4:
        return act.mean(axis=(1, 2))
    return act


def profile_grad_to_activation(record: ActivationRecord, layer: int, grad: np.ndarray) -> np.ndarray:
    """Map dL/d(profile matrix) back onto the recorded activation tensor."""
    act = record.outputs[record.activation_index(layer)]
    if act.ndim == 4:
        hw = act.shape[1] * act.shape[2]
        return np.broadcast_to(grad[:, None, None, :] / hw, act.shape).copy()
    return grad


def extract_activation_profiles(net: Network, clustering_batch: np.ndarray, layer: int,
                                standardize: bool = False) -> np.ndarray:
    """Per-filter activation profiles of ``layer``; row ``i`` is filter ``i`` (length B)."""
    if layer not in net.clusterable_layers:
        raise ValueError(f"layer {layer} ({net.layers[layer].kind}) has no clusterable activations")
    if len(clustering_batch) == 0:
        raise ValueError("clustering batch is empty")
    _, record = forward(net, clustering_batch)
    profiles = profile_matrix(record, layer).T.copy()
    if standardize:
        mu = profiles.mean(axis=1, keepdims=True)
        sd = profiles.std(axis=1, keepdims=True)
        profiles = (profiles - mu) / np.where(sd > 0, sd, 1.0)
    return profiles


# --- k-means -----------------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    sse: float
    centroids: np.ndarray
    sse_trace: list[float]


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def _plusplus(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(x, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters; any point will do
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.array(centers, dtype=np.float64)


def _lloyd(x, centroids, max_iter):
    k = len(centroids)
    trace = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # re-seed from the point farthest from its own centroid (lowest index on ties)
            own = ((x - centroids[labels]) ** 2).sum(axis=1)
            movable = counts[labels] > 1
            far = int(np.argmax(np.where(movable, own, -1.0)))
            counts[labels[far]] -= 1
            labels[far] = c
            counts[c] = 1
        centroids = np.array([x[labels == c].mean(axis=0) for c in range(k)])
    return labels, centroids, trace


def kmeans(profiles, k: int, restarts: int = 10, seed=0, max_iter: int = 100) -> KMeansResult:
    """Lowest-SSE k-means++/Lloyd partition over ``restarts`` seeded runs."""
    x = np.asarray(profiles, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if not 1 <= k <= n:
        raise InvalidGroupCount(f"cannot form {k} groups from {n} filters")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(s) for s in ss.spawn(restarts)]
    best = None
    for rng in rngs:
        labels, centroids, trace = _lloyd(x, _plusplus(x, k, rng), max_iter)
        sse = float(((x - centroids[labels]) ** 2).sum())
        # strict < keeps the lowest restart index on ties
        if best is None or sse < best.sse:
            best = KMeansResult(labels, sse, centroids, trace)
    return best


# --- group assignments -------------------------------------------------------------

def canonical_labels(labels) -> np.ndarray:
    """Renumber groups by first appearance so equal partitions compare equal."""
    mapping: dict[int, int] = {}
    return np.array([mapping.setdefault(int(v), len(mapping)) for v in labels], dtype=np.int64)


@dataclass
class LayerGroups:
    layer: int
    labels: np.ndarray

    def __post_init__(self):
        self.labels = canonical_labels(self.labels)

    @property
    def n_filters(self) -> int:
        return len(self.labels)

    @property
    def n_groups(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def groups(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == g) for g in range(self.n_groups)]


@dataclass
class GroupAssignment:
    layers: dict[int, LayerGroups]

    @classmethod
    def from_groups(cls, groups: dict[int, list[list[int]]]) -> "GroupAssignment":
        out = {}
        for layer, members in groups.items():
            n = sum(len(m) for m in members)
            labels = np.full(n, -1)
            for g, idx in enumerate(members):
                labels[list(idx)] = g
            if (labels < 0).any() or sorted(i for m in members for i in m) != list(range(n)):
                raise ValueError(f"layer {layer}: groups do not partition 0..{n - 1}")
            out[layer] = LayerGroups(layer, labels)
        return cls(out)

    @classmethod
    def singletons(cls, net: Network, layers=None) -> "GroupAssignment":
        layers = net.clusterable_layers if layers is None else layers
        return cls({l: LayerGroups(l, np.arange(net.filter_count(l))) for l in layers})

    def counts(self) -> dict[int, int]:
        return {l: g.n_groups for l, g in self.layers.items()}

    def check(self, net: Network) -> None:
        for l, g in self.layers.items():
            if l not in net.clusterable_layers:
                raise ValueError(f"layer {l} is not clusterable")
            if g.n_filters != net.filter_count(l):
                raise ValueError(f"layer {l}: assignment has {g.n_filters} filters, network has {net.filter_count(l)}")

    def to_text(self) -> str:
        """Key-value text: one ``[layer N]`` section with ``groups`` and ``group.K`` keys."""
        cp = configparser.ConfigParser()
        for l in sorted(self.layers):
            g = self.layers[l]
            sec = {"filters": str(g.n_filters), "groups": str(g.n_groups)}
            for k, members in enumerate(g.groups):
                sec[f"group.{k}"] = " ".join(str(int(i)) for i in members)
            cp[f"layer {l}"] = sec
        out = io.StringIO()
        cp.write(out)
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "GroupAssignment":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        groups = {}
        for name in cp.sections():
            if not name.startswith("layer "):
                raise ValueError(f"unexpected section [{name}]")
            sec = cp[name]
            n_groups = sec.getint("groups")
            members = [[int(t) for t in sec[f"group.{k}"].split()] for k in range(n_groups)]
            if any(not m for m in members):
                raise ValueError(f"[{name}] has an empty group")
            groups[int(name.split()[1])] = members
        return cls.from_groups(groups)


def build_group_assignment(net: Network, counts, clustering_batch, seed=0, restarts: int = 10,
                           standardize: bool = False) -> GroupAssignment:
    """Cluster every clusterable layer into the requested number of groups.

    ``counts`` lines up with ``net.clusterable_layers``; a ``None`` entry leaves
    that layer out of the assignment, and a count equal to the layer's filter
    count yields singletons.
    """
    layers = net.clusterable_layers
    counts = list(counts)
    if len(counts) != len(layers):
        raise ValueError(f"expected {len(layers)} group counts, got {len(counts)}")
    for l, k in zip(layers, counts):
        if k is not None and not 1 <= k <= net.filter_count(l):
            raise InvalidGroupCount(f"layer {l}: {k} groups for {net.filter_count(l)} filters", layer=l)
    _, record = forward(net, clustering_batch)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(len(layers))
    out = {}
    for l, k, ss in zip(layers, counts, seeds):
        if k is None:
            continue
        n_f = net.filter_count(l)
        if k == n_f:
            out[l] = LayerGroups(l, np.arange(n_f))
            continue
        profiles = profile_matrix(record, l).T
        if standardize:
            sd = profiles.std(axis=1, keepdims=True)
            profiles = (profiles - profiles.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
        out[l] = LayerGroups(l, kmeans(profiles, k, restarts, ss).labels)
    return GroupAssignment(out)
