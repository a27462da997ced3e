"""Labelled datasets, one-class-per-worker partitioning and the IDX file format."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng

# IDX type byte -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_TYPE_CODES = {dt.newbyteorder("="): code for code, dt in IDX_TYPES.items()}


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x d matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature rows and labels differ in count")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return int(np.unique(self.labels).size)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Shard:
    owner: int
    features: np.ndarray
    labels: np.ndarray
    rows: np.ndarray  # row indices into the parent dataset

    def __len__(self) -> int:
        return self.labels.shape[0]


def partition_by_label(dataset: LabeledDataset, n: int, seed: int = 0) -> list[Shard]:
    """Give worker i (1-based) the rows of the i-th smallest label.

    Every shard is trimmed to the size of the rarest class; which rows survive
    the trim, and their order, is a seeded permutation.
    """
    classes = np.unique(dataset.labels)
    if classes.size != n:
        raise ValueError(f"label/worker mismatch: {classes.size} classes for {n} workers")
    per_class = [np.flatnonzero(dataset.labels == c) for c in classes]
    size = min(len(r) for r in per_class)
    shards = []
    for i, rows in enumerate(per_class):
        perm = rng.stream(seed, rng.BATCH, i + 1, 0).permutation(len(rows))
        keep = rows[perm[:size]]
        shards.append(Shard(i + 1, dataset.features[keep], dataset.labels[keep], keep))
    return shards


def synth_classification(C: int, d: int, m: int, s: float, seed: int = 0) -> LabeledDataset:
    """Gaussian clusters (unit covariance) whose means are pairwise at least ``s`` apart.

    Directions are random; they are scaled so the closest pair sits exactly
    at distance ``s``.  ``s = 0`` puts every mean at the origin.
    """
    if C < 2 or m < 1 or d < 1:
        raise ValueError("need C >= 2, d >= 1 and m >= 1")
    if s < 0:
        raise ValueError("separation must be nonnegative")
    gen = rng.stream(seed, rng.INIT, 0, 0)
    means = gen.standard_normal((C, d))
    gaps = [np.linalg.norm(means[a] - means[b]) for a in range(C) for b in range(a + 1, C)]
    means *= s / min(gaps) if s > 0 else 0.0
    labels = np.repeat(np.arange(C), m)
    features = means[labels] + gen.standard_normal((C * m, d))
    return LabeledDataset(features, labels)


def normalize_features(dataset: LabeledDataset, mean: float | None = None, std: float | None = None) -> LabeledDataset:
    """Standardize with one scalar mean and std (dataset statistics by default)."""
    mean = float(dataset.features.mean()) if mean is None else mean
    std = float(dataset.features.std()) if std is None else std
    if std <= 0:
        std = 1.0
    return LabeledDataset((dataset.features - mean) / std, dataset.labels.copy())


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_TYPES:
        raise ValueError("not IDX")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError("truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = IDX_TYPES[raw[2]]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = raw[header:]
    if len(payload) < expected:
        raise ValueError("truncated")
    if len(payload) > expected:
        raise ValueError("trailing bytes after IDX payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    with _open(path) as fh:
        return parse_idx(fh.read())


def encode_idx(arr) -> bytes:
    arr = np.asarray(arr)
    native = arr.dtype.newbyteorder("=")
    if native not in _TYPE_CODES:
        raise TypeError(f"dtype {arr.dtype} has no IDX type code")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    code = _TYPE_CODES[native]
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(IDX_TYPES[code]).tobytes()


def write_idx(path, arr) -> None:
    path = Path(path)
    data = encode_idx(arr)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(data)


def load_idx_dataset(images_path, labels_path) -> LabeledDataset:
    """MNIST-style pair: images flattened to rows, labels as integers."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    return LabeledDataset(images.reshape(images.shape[0], -1).astype(float), labels.astype(int))
