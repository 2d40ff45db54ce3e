"""Datasets: seeded synthetic generators, IDX binary ingestion, batching.

Inputs are always an (n, d) float64 matrix in [0,1] plus integer labels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file (wrong magic, truncation, or count mismatch)."""


@dataclass
class DatasetHandle:
    inputs: np.ndarray          # (n, d) in [0, 1]
    labels: np.ndarray          # (n,) ints in [0, k)
    classes: int
    provenance: str
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")
        if self.inputs.shape[0] < 1:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError("label outside [0, classes)")
        if self.inputs.min() < 0.0 or self.inputs.max() > 1.0:
            raise ValueError("inputs outside [0, 1]")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _rescale_01(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0, keepdims=True)
    hi = x.max(axis=0, keepdims=True)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return (x - lo) / span


def gen_blobs(n: int, k: int, d: int, spread: float, seed: int) -> DatasetHandle:
    """k Gaussian clusters, means on a ring in the first two dims, min-max
    rescaled to [0,1]; class counts balanced within one sample."""
    if n < k:
        raise ValueError("need at least one sample per class")
    if d < 2:
        raise ValueError("blobs need d >= 2")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(k) / k
    means = np.zeros((k, d))
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    counts = [n // k + (1 if i < n % k else 0) for i in range(k)]
    xs, ys = [], []
    for cls, cnt in enumerate(counts):
        xs.append(means[cls] + spread * rng.standard_normal((cnt, d)))
        ys.append(np.full(cnt, cls))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    x = _rescale_01(x)
    return DatasetHandle(
        inputs=x, labels=y, classes=k,
        provenance=f"blobs:n={n},k={k},d={d},spread={spread},seed={seed}",
    )


def gen_two_moons(n: int, noise: float, seed: int) -> DatasetHandle:
    """Two interleaved half-circles in [0,1]^2."""
    rng = np.random.default_rng(seed)
    n0 = n // 2 + n % 2
    n1 = n - n0
    t0 = np.pi * rng.uniform(0, 1, n0)
    t1 = np.pi * rng.uniform(0, 1, n1)
    x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    x1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([x0, x1]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    perm = rng.permutation(n)
    # affine map of the noise-free envelope into [0,1]^2, shared by both arcs
    lo = np.array([-1.0, -0.5]) - 3 * noise
    hi = np.array([2.0, 1.0]) + 3 * noise
    x = np.clip((x[perm] - lo) / (hi - lo), 0.0, 1.0)
    return DatasetHandle(
        inputs=x, labels=y[perm], classes=2,
        provenance=f"moons:n={n},noise={noise},seed={seed}",
    )


def load_idx(images_path: str, labels_path: str) -> DatasetHandle:
    """Parse an IDX image/label file pair (big-endian, unsigned bytes)."""
    images, dims = _read_idx(images_path, IDX_IMAGES_MAGIC, ndims=3)
    labels, _ = _read_idx(labels_path, IDX_LABELS_MAGIC, ndims=1)
    n_img, h, w = dims
    if n_img != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {n_img} images vs {labels.shape[0]} labels"
        )
    inputs = images.reshape(n_img, h * w).astype(DTYPE) / 255.0
    classes = int(labels.max()) + 1 if labels.size else 0
    return DatasetHandle(
        inputs=inputs, labels=labels.astype(np.int64), classes=max(classes, 2),
        provenance=f"idx:images={images_path},labels={labels_path}",
        image_shape=(1, h, w),
    )


def _read_idx(path: str, expect_magic: int, ndims: int):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expect_magic:
        raise IdxFormatError(
            f"{path}: wrong magic 0x{magic:08x}, expected 0x{expect_magic:08x}"
        )
    header_len = 4 + 4 * ndims
    if len(blob) < header_len:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndims}I", blob[4:header_len])
    count = int(np.prod(dims))
    payload = blob[header_len:]
    if len(payload) < count:
        raise IdxFormatError(
            f"{path}: truncated payload ({len(payload)} of {count} bytes)"
        )
    data = np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)
    return data, dims


def write_idx(images_path: str, labels_path: str, dataset: DatasetHandle) -> None:
    """Inverse of load_idx for round-trip tests; inputs quantized to bytes."""
    if dataset.image_shape is None:
        raise ValueError("dataset has no image shape")
    _, h, w = dataset.image_shape
    n = len(dataset)
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def batches(n_or_dataset, batch_size: int, seed, weights=None):
    """Seeded permutation of active indices, split into batches.

    Yields index arrays, or (indices, weights) pairs when per-sample
    weights are supplied. The last short batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(n_or_dataset, DatasetHandle):
        idx = np.arange(len(n_or_dataset))
    elif np.isscalar(n_or_dataset):
        idx = np.arange(int(n_or_dataset))
    else:
        idx = np.asarray(n_or_dataset, dtype=np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(idx.shape[0])
    out = []
    for start in range(0, idx.shape[0], batch_size):
        chunk = order[start:start + batch_size]
        if weights is None:
            out.append(idx[chunk])
        else:
            w = np.asarray(weights, dtype=DTYPE)
            out.append((idx[chunk], w[chunk]))
    return out


def parse_dataset_uri(uri: str) -> DatasetHandle:
    """'blobs:n=...,k=...,d=...,spread=...,seed=...', 'moons:...', 'idx:...'."""
    kind, _, rest = uri.partition(":")
    kv = {}
    for item in rest.split(","):
        if item:
            key, _, val = item.partition("=")
            kv[key.strip()] = val.strip()
    try:
        if kind == "blobs":
            return gen_blobs(n=int(kv["n"]), k=int(kv["k"]), d=int(kv["d"]),
                             spread=float(kv["spread"]), seed=int(kv.get("seed", 0)))
        if kind == "moons":
            return gen_two_moons(n=int(kv["n"]), noise=float(kv.get("noise", 0.1)),
                                 seed=int(kv.get("seed", 0)))
        if kind == "idx":
            return load_idx(kv["images"], kv["labels"])
    except KeyError as exc:
        raise ValueError(f"dataset uri {uri!r} missing key {exc}") from None
    raise ValueError(f"unknown dataset kind {kind!r} in {uri!r}")
