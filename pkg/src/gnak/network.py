"""Small deterministic feed-forward engine: dense, conv2d, relu, softmax.

Activations are NHWC for convolutional stages and (batch, features) for
dense stages. A dense layer flattens whatever arrives. Filters live on the
last axis of every weight tensor, so filter ``i`` of a layer is
``W[..., i]`` together with ``b[i]``.

Parameters are kept on a dyadic lattice (multiples of ``LATTICE``). Updates
that are also snapped to the lattice are then exact in float64 as long as
magnitudes stay below ``2**12``, which is what keeps tied filters at a
constant offset from each other.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

LATTICE = 2.0**-40
# central differences at eps=1e-5 carry ~1e-11 rounding noise on O(1) losses
NOISE_FLOOR = 1e-9

KINDS = ("dense", "conv2d", "relu", "softmax")
PARAM_KINDS = ("dense", "conv2d")

_tokens = itertools.count(1)


class ShapeError(ValueError):
    """Input or gradient shape does not match what a layer expects."""

    def __init__(self, layer: int, expected, got):
        super().__init__(f"layer {layer}: expected shape {tuple(expected)}, got {tuple(got)}")
        self.layer = layer


class StaleRecordError(ValueError):
    pass


def snap(x: np.ndarray) -> np.ndarray:
    """Round values to the nearest multiple of ``LATTICE``."""
    return np.round(np.asarray(x, dtype=np.float64) / LATTICE) * LATTICE


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAM_KINDS and self.filters < 1:
            raise ValueError("parameterized layers need at least one filter")
        if self.kind == "conv2d" and (self.kernel < 1 or self.stride < 1):
            raise ValueError("conv2d needs kernel >= 1 and stride >= 1")

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "dense":
            shapes = {"W": (int(np.prod(self.in_shape)), self.filters)}
        elif self.kind == "conv2d":
            shapes = {"W": (self.kernel, self.kernel, self.in_shape[-1], self.filters)}
        else:
            return {}
        if self.has_bias:
            shapes["b"] = (self.filters,)
        return shapes


# Layer constructors used with Network.build; shapes are filled in there.
def dense(units: int, bias: bool = True) -> dict:
    return {"kind": "dense", "filters": units, "has_bias": bias}


def conv2d(filters: int, kernel: int, stride: int = 1, bias: bool = True) -> dict:
    return {"kind": "conv2d", "filters": filters, "kernel": kernel, "stride": stride, "has_bias": bias}


def relu() -> dict:
    return {"kind": "relu"}


def softmax() -> dict:
    return {"kind": "softmax"}


def _out_shape(kind, in_shape, filters, kernel, stride):
    if kind == "dense":
        return (filters,)
    if kind == "conv2d":
        if len(in_shape) != 3:
            raise ValueError(f"conv2d needs (H, W, C) input, got {in_shape}")
        h, w, _ = in_shape
        if h < kernel or w < kernel:
            raise ValueError(f"kernel {kernel} larger than input {in_shape}")
        return ((h - kernel) // stride + 1, (w - kernel) // stride + 1, filters)
    return tuple(in_shape)


@dataclass
class Network:
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    token: int = field(default_factory=lambda: next(_tokens))

    def __post_init__(self):
        if len(self.layers) != len(self.params):
            raise ValueError("one parameter dict per layer required")
        prev = tuple(self.input_shape)
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            if tuple(spec.in_shape) != prev:
                raise ShapeError(i, prev, spec.in_shape)
            prev = tuple(spec.out_shape)
            expected = spec.param_shapes
            if set(p) != set(expected):
                raise ValueError(f"layer {i}: parameters {sorted(p)} != {sorted(expected)}")
            for name, shape in expected.items():
                if p[name].shape != shape:
                    raise ShapeError(i, shape, p[name].shape)

    @classmethod
    def build(cls, input_shape, layer_defs, rng: np.random.Generator | int = 0) -> "Network":
        """Create a network with scaled Gaussian weights (std 1/sqrt(fan_in)) and zero biases."""
        rng = np.random.default_rng(rng)
        shape = tuple(int(d) for d in input_shape)
        layers, params = [], []
        for d in layer_defs:
            d = dict(d)
            kind = d.pop("kind")
            filters = d.get("filters", 0)
            kernel = d.get("kernel", 0)
            stride = d.get("stride", 1)
            out = _out_shape(kind, shape, filters, kernel, stride)
            spec = LayerSpec(kind, shape, out, filters, kernel, stride, d.get("has_bias", True))
            layers.append(spec)
            params.append(init_params(spec, rng))
            shape = out
        return cls(tuple(int(s) for s in input_shape), layers, params)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape

    @property
    def param_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind in PARAM_KINDS]

    @property
    def head(self) -> int:
        """Index of the replaceable classification layer (last parameterized layer)."""
        return self.param_layers[-1]

    @property
    def clusterable_layers(self) -> list[int]:
        return self.param_layers[:-1]

    def filter_count(self, layer: int) -> int:
        return self.layers[layer].filters

    def copy(self) -> "Network":
        return Network(self.input_shape, list(self.layers),
                       [{k: v.copy() for k, v in p.items()} for p in self.params])

    def with_params(self, params) -> "Network":
        return Network(self.input_shape, list(self.layers), params)

    def replace_head(self, num_classes: int, rng) -> "Network":
        """Fresh, seeded head with ``num_classes`` outputs; the body is copied."""
        rng = np.random.default_rng(rng)
        h = self.head
        old = self.layers[h]
        spec = LayerSpec("dense", old.in_shape, (num_classes,), num_classes, has_bias=old.has_bias)
        layers = list(self.layers)
        layers[h] = spec
        params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        params[h] = init_params(spec, rng)
        # Layers after the head (softmax) only carry the shape through.
        shape = spec.out_shape
        for i in range(h + 1, len(layers)):
            layers[i] = LayerSpec(layers[i].kind, shape, shape)
        return Network(self.input_shape, layers, params)

    def n_params(self) -> int:
        return sum(v.size for p in self.params for v in p.values())


def init_params(spec: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    shapes = spec.param_shapes
    if not shapes:
        return {}
    w_shape = shapes["W"]
    fan_in = int(np.prod(w_shape[:-1]))
    out = {"W": snap(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=w_shape))}
    if "b" in shapes:
        out["b"] = np.zeros(shapes["b"])
    return out


@dataclass
class ActivationRecord:
    """Inputs and per-layer outputs of one forward pass."""

    batch: np.ndarray
    outputs: list[np.ndarray]
    layers: list[LayerSpec]
    token: int

    @property
    def batch_size(self) -> int:
        return self.batch.shape[0]

    def layer_input(self, i: int) -> np.ndarray:
        return self.batch if i == 0 else self.outputs[i - 1]

    def activation_index(self, layer: int) -> int:
        return activation_index(self.layers, layer)


def activation_index(layers: list[LayerSpec], layer: int) -> int:
    """Record index holding the post-nonlinearity output of ``layer``."""
    if layer + 1 < len(layers) and layers[layer + 1].kind == "relu":
        return layer + 1
    return layer


# --- per-kind forward / backward -------------------------------------------------

def _patches(x: np.ndarray, k: int, s: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::s, ::s]  # (B, Ho, Wo, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3)  # (B, Ho, Wo, k, k, C)


def _conv_forward(spec, p, x):
    k, s = spec.kernel, spec.stride
    cols = _patches(x, k, s)
    b, ho, wo = cols.shape[:3]
    y = cols.reshape(b * ho * wo, -1) @ p["W"].reshape(-1, spec.filters)
    if spec.has_bias:
        y = y + p["b"]
    return y.reshape(b, ho, wo, spec.filters)


def _conv_backward(spec, p, x, g):
    k, s = spec.kernel, spec.stride
    cols = _patches(x, k, s)
    b, ho, wo = cols.shape[:3]
    g2 = g.reshape(b * ho * wo, spec.filters)
    grads = {"W": (cols.reshape(b * ho * wo, -1).T @ g2).reshape(p["W"].shape)}
    if spec.has_bias:
        grads["b"] = g2.sum(axis=0)
    dcols = (g2 @ p["W"].reshape(-1, spec.filters).T).reshape(b, ho, wo, k, k, x.shape[-1])
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    return dx, grads


def _dense_forward(spec, p, x):
    y = x.reshape(x.shape[0], -1) @ p["W"]
    if spec.has_bias:
        y = y + p["b"]
    return y


def _dense_backward(spec, p, x, g):
    x2 = x.reshape(x.shape[0], -1)
    grads = {"W": x2.T @ g}
    if spec.has_bias:
        grads["b"] = g.sum(axis=0)
    return (g @ p["W"].T).reshape(x.shape), grads


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_forward(spec, p, x):
    if spec.kind == "dense":
        return _dense_forward(spec, p, x)
    if spec.kind == "conv2d":
        return _conv_forward(spec, p, x)
    if spec.kind == "relu":
        return np.maximum(x, 0.0)
    return _softmax(x)


def _layer_backward(spec, p, x, y, g):
    if spec.kind == "dense":
        return _dense_backward(spec, p, x, g)
    if spec.kind == "conv2d":
        return _conv_backward(spec, p, x, g)
    if spec.kind == "relu":
        # subgradient 0 at the kink
        return g * (x > 0), {}
    return y * (g - (g * y).sum(axis=-1, keepdims=True)), {}


def forward(net: Network, batch: np.ndarray) -> tuple[np.ndarray, ActivationRecord]:
    """Run ``batch`` through ``net``; return the final output and every layer's output."""
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != tuple(net.input_shape):
        raise ShapeError(0, net.input_shape, x.shape[1:])
    outputs = []
    for spec, p in zip(net.layers, net.params):
        x = _layer_forward(spec, p, x)
        outputs.append(x)
    return x, ActivationRecord(np.asarray(batch, dtype=np.float64), outputs, net.layers, net.token)


def backward(net: Network, record: ActivationRecord, loss_grad: np.ndarray | None,
             extra: dict[int, np.ndarray] | None = None) -> list[dict[str, np.ndarray]]:
    """Reverse-mode gradients of a loss with respect to every parameter.

    ``loss_grad`` is dL/d(output of the last layer). ``extra`` maps record
    indices to additional dL/d(output of that layer) terms, which is how
    losses on hidden activations enter. Index -1 addresses the input batch
    and is ignored.
    """
    if record.token != net.token or len(record.outputs) != len(net.layers):
        raise StaleRecordError("activation record was not produced by this network")
    extra = extra or {}
    last = len(net.layers) - 1
    out_shape = record.outputs[last].shape
    g = np.zeros(out_shape) if loss_grad is None else np.asarray(loss_grad, dtype=np.float64)
    if g.shape != out_shape:
        raise ShapeError(last, out_shape, g.shape)
    for idx, eg in extra.items():
        if idx >= 0 and np.shape(eg) != record.outputs[idx].shape:
            raise ShapeError(idx, record.outputs[idx].shape, np.shape(eg))
    grads: list[dict[str, np.ndarray]] = [{} for _ in net.layers]
    for i in range(last, -1, -1):
        if i in extra:
            g = g + extra[i]
        spec = net.layers[i]
        g, grads[i] = _layer_backward(spec, net.params[i], record.layer_input(i), record.outputs[i], g)
    return grads


# --- gradient checking -----------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖analytic − numeric‖ / ‖numeric‖.

    Below ``NOISE_FLOOR`` a finite difference is rounding noise, so tiny
    gradients are compared by absolute difference instead.
    """
    diff = float(np.linalg.norm(analytic - numeric))
    scale = float(np.linalg.norm(numeric))
    if scale < NOISE_FLOOR:
        return diff
    return diff / scale


def numeric_gradients(net: Network, loss_fn, batch, eps: float):
    """Central finite differences of ``loss_fn(net, batch)[0]`` for every parameter entry."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = net.copy()
    out = []
    for p in work.params:
        gp = {}
        for name, arr in p.items():
            num = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), num.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                lp = _finite_loss(loss_fn, work.with_params(work.params), batch)
                flat[j] = orig - eps
                lm = _finite_loss(loss_fn, work.with_params(work.params), batch)
                flat[j] = orig
                nflat[j] = (lp - lm) / (2 * eps)
            gp[name] = num
        out.append(gp)
    return out


def _finite_loss(loss_fn, net, batch):
    loss = float(loss_fn(net, batch)[0])
    if not np.isfinite(loss):
        raise ValueError("loss is not finite")
    return loss


def check_gradients(net: Network, loss_fn, batch, eps: float = 1e-5) -> float:
    """Worst per-tensor relative error between analytic and central-difference gradients.

    ``loss_fn(net, batch)`` must return ``(loss, grads)`` with ``grads`` shaped
    like ``net.params``.
    """
    loss, analytic = loss_fn(net, batch)
    if not np.isfinite(loss):
        raise ValueError("loss is not finite")
    numeric = numeric_gradients(net, loss_fn, batch, eps)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        for name in gn:
            worst = max(worst, relative_error(ga[name], gn[name]))
    return worst


def zeros_like_params(net: Network) -> list[dict[str, np.ndarray]]:
    return [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]


def add_grads(a, b, scale: float = 1.0):
    return [{k: ga[k] + scale * gb[k] for k in ga} for ga, gb in zip(a, b)]
