"""GNAK binary checkpoints.

Layout, all integers 32-bit little-endian unsigned::

    b"GNAK"  version
    n_input_dims  input_dims...
    n_layers
    per layer: kind_code
               n_in_dims in_dims...  n_out_dims out_dims...
               filters kernel stride has_bias
    parameter tensors, float32 little-endian, in layer order (W, then b;
    for lstm layers Wx, Wh, b)

Kind codes: dense 0, conv2d 1, relu 2, softmax 3, lstm 4.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import LayerSpec, Network

MAGIC = b"GNAK"
VERSION = 1
KIND_CODES = {"dense": 0, "conv2d": 1, "relu": 2, "softmax": 3, "lstm": 4}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


class CheckpointError(ValueError):
    pass


def _lstm_shapes(n_in: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {"Wx": (n_in, 4 * hidden), "Wh": (hidden, 4 * hidden), "b": (4 * hidden,)}


def _entry_shapes(kind, in_shape, out_shape, filters, kernel, stride, has_bias):
    if kind == "lstm":
        return _lstm_shapes(in_shape[0], out_shape[0])
    return LayerSpec(kind, tuple(in_shape), tuple(out_shape), filters, kernel, stride, has_bias).param_shapes


def write_gnak(path, input_shape, entries) -> None:
    """``entries``: list of ``(kind, in_shape, out_shape, filters, kernel, stride, has_bias, tensors)``."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<I", len(input_shape)) + struct.pack(f"<{len(input_shape)}I", *input_shape)
    buf += struct.pack("<I", len(entries))
    payload = bytearray()
    for kind, in_shape, out_shape, filters, kernel, stride, has_bias, tensors in entries:
        buf += struct.pack("<I", KIND_CODES[kind])
        for dims in (in_shape, out_shape):
            buf += struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
        buf += struct.pack("<4I", filters, kernel, stride, int(has_bias))
        shapes = _entry_shapes(kind, in_shape, out_shape, filters, kernel, stride, has_bias)
        for name, shape in shapes.items():
            arr = np.asarray(tensors[name])
            if arr.shape != shape:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {shape}")
            payload += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf + payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals if n > 1 else vals[0]


def read_gnak(path):
    """Return ``(input_shape, entries)`` in the same form ``write_gnak`` accepts."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported GNAK version {version} (reader supports {VERSION})")
    input_shape = tuple(r.u32() for _ in range(r.u32()))
    n_layers = r.u32()
    headers = []
    for _ in range(n_layers):
        code = r.u32()
        if code not in CODE_KINDS:
            raise CheckpointError(f"unknown layer kind code {code} at byte {r.pos - 4}")
        in_shape = tuple(r.u32() for _ in range(r.u32()))
        out_shape = tuple(r.u32() for _ in range(r.u32()))
        filters, kernel, stride, has_bias = r.u32(4)
        headers.append((CODE_KINDS[code], in_shape, out_shape, filters, kernel, stride, bool(has_bias)))
    entries = []
    for h in headers:
        tensors = {}
        for name, shape in _entry_shapes(*h).items():
            n = int(np.prod(shape))
            raw = np.frombuffer(r.take(4 * n), dtype="<f4")
            tensors[name] = raw.astype(np.float64).reshape(shape)
        entries.append((*h, tensors))
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after parameters")
    return input_shape, entries


def save_checkpoint(net: Network, path) -> None:
    entries = [(s.kind, s.in_shape, s.out_shape, s.filters, s.kernel, s.stride, s.has_bias, p)
               for s, p in zip(net.layers, net.params)]
    write_gnak(path, net.input_shape, entries)


def load_checkpoint(path) -> Network:
    input_shape, entries = read_gnak(path)
    layers, params = [], []
    for kind, in_shape, out_shape, filters, kernel, stride, has_bias, tensors in entries:
        if kind == "lstm":
            raise CheckpointError("checkpoint holds a policy, not a network")
        layers.append(LayerSpec(kind, in_shape, out_shape, filters, kernel, stride, has_bias))
        params.append(tensors)
    return Network(input_shape, layers, params)
