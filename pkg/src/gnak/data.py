"""Datasets: IDX files, the synthetic transfer task, and k-shot splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IDXError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    # global class identities of local labels 0..n_classes-1
    class_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not self.class_ids:
            self.class_ids = tuple(range(self.n_classes))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, self.class_ids)


# --- IDX ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IDXError(f"{path}: truncated header (file has {len(data)} bytes, need 4 at byte 0)")
    if data[0] != 0 or data[1] != 0:
        raise IDXError(f"{path}: bad magic bytes {data[:2].hex()} at byte 0")
    code, ndim = data[2], data[3]
    if code not in IDX_TYPES:
        raise IDXError(f"{path}: unknown IDX type code 0x{code:02x} at byte 2")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IDXError(f"{path}: truncated header (dimension sizes end at byte {header_end}, file has {len(data)})")
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = IDX_TYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    have = len(data) - header_end
    if have < need:
        raise IDXError(f"{path}: truncated payload at byte {len(data)} (need {need} payload bytes, have {have})")
    if have > need:
        raise IDXError(f"{path}: {have - need} unexpected bytes after payload at byte {header_end + need}")
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    for code, dt in IDX_TYPES.items():
        if dt.kind == array.dtype.kind and dt.itemsize == array.dtype.itemsize:
            break
    else:
        raise IDXError(f"no IDX type for dtype {array.dtype}")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dt).tobytes())


def load_idx_dataset(images_path, labels_path) -> Dataset:
    """Images become (N, H, W, C) floats in [0, 1]; labels are class ids."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise IDXError(f"{labels_path}: labels must be one-dimensional, got {labels.ndim} dims")
    if len(images) != len(labels):
        raise IDXError(f"image count {len(images)} does not match label count {len(labels)}")
    if images.ndim == 3:
        images = images[..., None]
    if images.dtype == np.uint8:
        x = images.astype(np.float64) / 255.0
    else:
        x = images.astype(np.float64)
        lo, hi = x.min(initial=0.0), x.max(initial=1.0)
        x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    labels = labels.astype(np.int64)
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(x, labels, n_classes)


# --- synthetic transfer task ----------------------------------------------------------

IMAGE_SIZE = 8


def stroke_bank(size: int = IMAGE_SIZE) -> np.ndarray:
    """Fixed primitive strokes (bars, diagonals, blobs), each an (size, size) map in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bank = []
    for r in (1, 3, 5):
        bank.append(np.exp(-((yy - r - 0.5) ** 2) / 0.8))  # horizontal bars
        bank.append(np.exp(-((xx - r - 0.5) ** 2) / 0.8))  # vertical bars
    bank.append(np.exp(-((yy - xx) ** 2) / 1.0))
    bank.append(np.exp(-((yy + xx - size + 1) ** 2) / 1.0))
    for cy, cx in ((2, 2), (2, 5), (5, 2), (5, 5)):
        bank.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0))
    return np.array(bank)


def _class_prototypes(rng, n_classes, n_strokes, active=3):
    protos = np.zeros((n_classes, n_strokes))
    for c in range(n_classes):
        idx = rng.choice(n_strokes, size=active, replace=False)
        protos[c, idx] = rng.uniform(0.6, 1.0, size=active)
    return protos


def _render(rng, protos, labels, bank, jitter, distractor, noise):
    n = len(labels)
    coef = protos[labels] * rng.uniform(1 - jitter, 1 + jitter, size=(n, len(bank)))
    # class-independent nuisance strokes
    coef += distractor * rng.random((n, len(bank))) * (rng.random((n, len(bank))) < 0.25)
    img = np.einsum("ns,shw->nhw", coef, bank)
    img += noise * rng.normal(size=img.shape)
    return np.clip(img / 1.5, 0.0, 1.0)[..., None]


def make_synthetic_transfer_task(seed: int, n_source: int = 5, n_target: int = 5,
                                 per_class: int = 200, jitter: float = 0.5,
                                 distractor: float = 0.8, noise: float = 0.15) -> tuple[Dataset, Dataset]:
    """Two class-disjoint datasets built from one shared stroke bank.

    Every class is a sparse positive mix of strokes; samples jitter the mix,
    add nuisance strokes and pixel noise. Source classes get global ids
    ``0..n_source-1`` and target classes the next ``n_target`` ids.
    """
    rng = np.random.default_rng([seed, 7001])
    bank = stroke_bank()
    protos = _class_prototypes(rng, n_source + n_target, len(bank))
    out = []
    for lo, n in ((0, n_source), (n_source, n_target)):
        labels = np.repeat(np.arange(n), per_class)
        labels = labels[rng.permutation(len(labels))]
        images = _render(rng, protos[lo:lo + n], labels, bank, jitter, distractor, noise)
        out.append(Dataset(images, labels, n, tuple(range(lo, lo + n))))
    return out[0], out[1]


def make_synthetic_domain_task(seed: int, n_classes: int = 5, per_class: int = 200,
                               shift_noise: float = 0.35, shift_distractor: float = 1.2,
                               contrast: float = 0.7) -> tuple[Dataset, Dataset]:
    """Same classes in both domains; the target domain is rendered dimmer and noisier."""
    rng = np.random.default_rng([seed, 7002])
    bank = stroke_bank()
    protos = _class_prototypes(rng, n_classes, len(bank))
    out = []
    for noise, distractor, scale in ((0.15, 0.8, 1.0), (shift_noise, shift_distractor, contrast)):
        labels = np.repeat(np.arange(n_classes), per_class)
        labels = labels[rng.permutation(len(labels))]
        images = _render(rng, protos * scale, labels, bank, 0.5, distractor * scale, noise)
        out.append(Dataset(images, labels, n_classes))
    return out[0], out[1]


# --- splits ---------------------------------------------------------------------------

def sample_kshot(dataset: Dataset, k: int, seed) -> tuple[Dataset, Dataset]:
    """Exactly ``k`` random samples per class, and everything else as held-out data."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < k:
            raise ValueError(f"class {c} has {len(idx)} samples, fewer than k={k}")
        chosen.append(rng.choice(idx, size=k, replace=False))
    kshot = np.sort(np.concatenate(chosen))
    held = np.setdiff1d(np.arange(len(dataset)), kshot)
    return dataset.subset(kshot), dataset.subset(held)


def split_indices(n: int, frac: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Random split of ``range(n)`` into (first ``frac`` share, remainder), both sorted."""
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(frac * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def per_class_batch(dataset: Dataset, per_class: int, seed) -> np.ndarray:
    """Images of up to ``per_class`` random samples of every class (clustering batch)."""
    rng = np.random.default_rng(seed)
    idx = []
    for c in range(dataset.n_classes):
        pool = np.flatnonzero(dataset.labels == c)
        idx.append(rng.choice(pool, size=min(per_class, len(pool)), replace=False))
    return dataset.images[np.sort(np.concatenate(idx))]
