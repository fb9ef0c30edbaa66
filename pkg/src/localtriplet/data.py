"""Dataset ingestion and generation.

Readers for the big-endian IDX image/label format (gzip transparently
supported), deterministic stratified splitting, isotropic Gaussian blob
generation for desk-scale experiments, and a versioned npz cache.

Samples are stored flat (n, d) in float64 with the original tensor shape
kept alongside; image pixels are scaled to [0, 1].
"""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CACHE_FORMAT_VERSION = 1


@dataclass
class Dataset:
    """Flat samples with integer class labels and a split tag."""

    samples: np.ndarray                 # (n, d) float64
    labels: np.ndarray                  # (n,) int64
    sample_shape: tuple[int, ...]       # original tensor shape per sample
    split: str = "train"
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"count_mismatch: {self.samples.shape} samples vs {self.labels.shape} labels")
        if int(np.prod(self.sample_shape)) != self.samples.shape[1]:
            raise ValueError(
                f"shape_mismatch: sample_shape {self.sample_shape} vs flat {self.samples.shape[1]}")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, ids, split: str | None = None) -> "Dataset":
        ids = np.asarray(ids, dtype=np.int64)
        return Dataset(self.samples[ids], self.labels[ids], self.sample_shape,
                       split if split is not None else self.split, dict(self.normalization))

    def fingerprint(self) -> str:
        """Content hash over sample bytes, labels, and shape."""
        h = hashlib.sha256()
        h.update(str(self.sample_shape).encode())
        h.update(self.samples.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def _open_maybe_gz(path):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count: int, path) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise ValueError(f"truncated_file: {path} ended after {len(data)} of {count} bytes")
    return data


def _read_idx(path, expected_magic: int, expected_dims: int) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        (magic,) = struct.unpack(">i", _read_exact(f, 4, path))
        if magic != expected_magic:
            raise ValueError(f"bad_magic: {path} has magic {magic:#010x}, "
                             f"expected {expected_magic:#010x}")
        dims = struct.unpack(f">{expected_dims}i", _read_exact(f, 4 * expected_dims, path))
        total = int(np.prod(dims))
        raw = _read_exact(f, total, path)
        if f.read(1):
            raise ValueError(f"truncated_file: {path} has trailing bytes beyond header count")
        return np.frombuffer(raw, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair, pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"count_mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    n, rows, cols = images.shape
    samples = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(samples, labels.astype(np.int64), (rows, cols, 1),
                   split="train", normalization={"divisor": 255.0, "offset": 0.0})


def _largest_remainder(counts: np.ndarray, frac: float, target: int) -> np.ndarray:
    """Per-class allocation summing exactly to `target`, each within one
    sample of frac * count."""
    exact = counts * frac
    base = np.floor(exact).astype(np.int64)
    base = np.minimum(base, counts)
    short = target - int(base.sum())
    if short > 0:
        order = np.lexsort((np.arange(counts.size), -(exact - base)))
        for idx in order:
            if short == 0:
                break
            if base[idx] < counts[idx]:
                base[idx] += 1
                short -= 1
    elif short < 0:
        order = np.lexsort((np.arange(counts.size), exact - base))
        for idx in order:
            if short == 0:
                break
            if base[idx] > 0:
                base[idx] -= 1
                short += 1
    return base


def split(dataset: Dataset, train_frac: float, val_frac: float, seed: int):
    """Deterministic stratified partition into (train, val, test).

    Global split sizes are round(frac * n); per-class allocations use
    largest remainders, so every class lands within one sample of its
    overall proportion. Index sets are disjoint and exhaustive.
    """
    if not (0.0 < train_frac < 1.0) or not (0.0 < val_frac < 1.0):
        raise ValueError(f"bad_fraction: train={train_frac}, val={val_frac} must be in (0,1)")
    if train_frac + val_frac > 1.0 + 1e-12:
        raise ValueError(f"bad_fraction: train+val = {train_frac + val_frac} > 1")

    rng = np.random.default_rng(seed)
    classes = dataset.classes
    counts = np.array([np.sum(dataset.labels == c) for c in classes])
    n_train = _largest_remainder(counts, train_frac, round(train_frac * dataset.n))
    remaining = counts - n_train
    n_val_target = min(round(val_frac * dataset.n), int(remaining.sum()))
    # allocate val proportionally out of what train left per class
    val_share = val_frac / max(1.0 - train_frac, 1e-12)
    n_val = _largest_remainder(remaining, val_share, n_val_target)

    train_ids, val_ids, test_ids = [], [], []
    for i, c in enumerate(classes):
        members = np.flatnonzero(dataset.labels == c)
        members = members[rng.permutation(members.size)]
        a, b = int(n_train[i]), int(n_train[i] + n_val[i])
        train_ids.append(members[:a])
        val_ids.append(members[a:b])
        test_ids.append(members[b:])
    train_ids = np.sort(np.concatenate(train_ids))
    val_ids = np.sort(np.concatenate(val_ids))
    test_ids = np.sort(np.concatenate(test_ids))
    return (dataset.subset(train_ids, "train"),
            dataset.subset(val_ids, "val"),
            dataset.subset(test_ids, "test"))


def stratified_subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Class-proportional random subset of exactly n samples."""
    if not (1 <= n <= dataset.n):
        raise ValueError(f"bad_subset: n={n} of {dataset.n}")
    if n == dataset.n:
        return dataset
    rng = np.random.default_rng(seed)
    classes = dataset.classes
    counts = np.array([np.sum(dataset.labels == c) for c in classes])
    take = _largest_remainder(counts, n / dataset.n, n)
    ids = []
    for i, c in enumerate(classes):
        members = np.flatnonzero(dataset.labels == c)
        members = members[rng.permutation(members.size)]
        ids.append(members[:take[i]])
    return dataset.subset(np.sort(np.concatenate(ids)))


def make_blobs(classes: int, per_class: int, dim: int, spacing: float,
               std: float, seed: int, max_tries: int = 200) -> Dataset:
    """Isotropic Gaussian clusters with pairwise center distance >= spacing.

    Centers are drawn uniformly in a box of side spacing * classes and
    rejected until far enough apart; impossible packings raise after
    `max_tries` draws per center.
    """
    if classes < 2:
        raise ValueError(f"bad_classes: need >= 2, got {classes}")
    if per_class < 1 or dim < 1 or spacing <= 0 or std < 0:
        raise ValueError("bad_blob_config")
    rng = np.random.default_rng(seed)
    side = spacing * classes
    centers = []
    for _ in range(classes):
        for attempt in range(max_tries):
            cand = rng.uniform(0.0, side, size=dim)
            if all(np.linalg.norm(cand - c) >= spacing for c in centers):
                centers.append(cand)
                break
        else:
            raise ValueError(
                f"packing_failed: could not place {classes} centers >= {spacing} apart in dim {dim}")
    samples = np.concatenate([
        c + std * rng.standard_normal((per_class, dim)) for c in centers])
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    return Dataset(samples, labels, (dim,), split="train")


def save_dataset(path, dataset: Dataset) -> None:
    """Versioned npz cache; reload is bit-identical."""
    meta = {
        "cache_format_version": CACHE_FORMAT_VERSION,
        "sample_shape": list(dataset.sample_shape),
        "split": dataset.split,
        "normalization": dataset.normalization,
    }
    np.savez(path, samples=dataset.samples, labels=dataset.labels,
             meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))


def load_dataset(path) -> Dataset:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("cache_format_version") != CACHE_FORMAT_VERSION:
            raise ValueError(f"bad_cache: version {meta.get('cache_format_version')}")
        return Dataset(z["samples"], z["labels"], tuple(meta["sample_shape"]),
                       meta["split"], meta["normalization"])
