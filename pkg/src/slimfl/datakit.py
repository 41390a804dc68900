"""Datasets, IDX files and Dirichlet non-IID partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    BadMagicError,
    CountMismatchError,
    InvalidParameterError,
    ShapeError,
    TruncatedPayloadError,
)
from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise InvalidParameterError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes)


@dataclass(frozen=True)
class Partition:
    """Disjoint per-device index lists covering every sample once."""

    shards: tuple[np.ndarray, ...]
    n: int

    def __post_init__(self):
        allidx = np.concatenate(self.shards) if self.shards else np.empty(0, np.int64)
        if allidx.size != self.n or not np.array_equal(np.sort(allidx), np.arange(self.n)):
            raise InvalidParameterError("shards must partition range(n)")

    @property
    def K(self) -> int:
        return len(self.shards)

    def sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.shards], dtype=np.int64)

    def class_counts(self, labels, classes: int = 10) -> np.ndarray:
        """``(classes, K)`` table of per-device class counts."""
        labels = np.asarray(labels)
        out = np.zeros((classes, self.K), dtype=np.int64)
        for k, shard in enumerate(self.shards):
            out[:, k] = np.bincount(labels[shard], minlength=classes)
        return out


def largest_remainder(q: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``q * total``; ties go to the lower index."""
    raw = q * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def dirichlet_partition(labels, K: int, alpha: float, seed: int) -> Partition:
    labels = np.asarray(labels, dtype=np.int64)
    if K < 1:
        raise InvalidParameterError(f"K must be >= 1, got {K}")
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    buckets: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = stream(seed, "partition-shuffle", int(c)).permutation(idx)
        q = stream(seed, "dirichlet", int(c)).dirichlet(np.full(K, float(alpha)))
        counts = largest_remainder(q, idx.size)
        cuts = np.concatenate([[0], np.cumsum(counts)])
        for k in range(K):
            buckets[k].append(idx[cuts[k]:cuts[k + 1]])
    shards = tuple(
        np.sort(np.concatenate(b)) if b else np.empty(0, np.int64) for b in buckets
    )
    return Partition(shards, labels.size)


def synthetic_classification(n: int, classes: int = 10, seed: int = 0, image_size: int = 28,
                             noise: float = 0.25, blobs: int = 3) -> Dataset:
    """Class templates made of Gaussian blobs plus pixel noise, clipped to [0, 1]."""
    if n < classes:
        raise InvalidParameterError("need at least one sample per class")
    trng = stream(seed, "templates")
    grid = np.arange(image_size) + 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    templates = np.zeros((classes, image_size, image_size))
    for c in range(classes):
        for _ in range(blobs):
            cy, cx = trng.uniform(0, image_size, 2)
            width = trng.uniform(0.08, 0.2) * image_size
            templates[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        templates[c] /= templates[c].max()
    labels = stream(seed, "labels").permutation(np.arange(n) % classes)
    images = templates[labels] + noise * stream(seed, "pixel-noise").standard_normal((n, image_size, image_size))
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), classes)


def holdout_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded ``(train, held_out)`` split; ``fraction`` goes to the held-out part."""
    if not 0.0 <= fraction < 1.0:
        raise InvalidParameterError("holdout fraction must be in [0, 1)")
    perm = stream(seed, "holdout").permutation(len(dataset))
    n_test = int(round(fraction * len(dataset)))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


# --- IDX container -------------------------------------------------------

def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than its magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayloadError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - header} bytes, expected {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx_bytes(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    images, labels = load_idx_bytes(images_path, labels_path)
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), classes)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write pixels as ``round(255 x)`` bytes; inverse of :func:`load_idx` on byte-valued data."""
    img = np.rint(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    n, h, w = img.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + img.tobytes())
    lab = dataset.labels.astype(np.uint8)
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, n) + lab.tobytes())


# --- batching ------------------------------------------------------------

def batch_indices(device_indices, batch_size: int, seed: int, device: int, epoch: int) -> list[np.ndarray]:
    """Shuffled batches of one device's shard for one epoch; the last short batch is kept."""
    if batch_size < 1:
        raise InvalidParameterError("batch_size must be >= 1")
    idx = np.asarray(device_indices, dtype=np.int64)
    if idx.size == 0:
        return []
    order = stream(seed, "minibatch", device, epoch).permutation(idx)
    return [order[i:i + batch_size] for i in range(0, order.size, batch_size)]


def minibatches(dataset: Dataset, device_indices, batch_size: int, seed: int, device: int,
                epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for b in batch_indices(device_indices, batch_size, seed, device, epoch):
        yield dataset.images[b], dataset.labels[b]
