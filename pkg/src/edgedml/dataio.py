"""Dataset loading, synthesis, splitting, and per-worker shard sampling.

IDX container support is bit-exact big-endian: magic 0x00000803 for image
tensors, 0x00000801 for label vectors. Synthetic datasets are Gaussian blobs
with one mean per class; a skew knob turns balanced class counts into a
geometric progression for non-IID experiments.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import AllocationError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    provenance: str = "synthetic_iid"  # idx_file | synthetic_iid | synthetic_noniid

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise FormatError("features must be a non-empty 2-d matrix")
        if len(self.labels) != len(self.features):
            raise FormatError("feature/label row counts differ")
        if not np.isfinite(self.features).all():
            raise FormatError("non-finite feature values")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise FormatError("label out of range for num_classes")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Shard:
    """A worker's slice of a dataset: row indices plus a serving cursor."""

    indices: np.ndarray
    cursor: int = 0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.indices)


def _read_exact(fh, nbytes: int, path: str) -> bytes:
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError(f"{path}: truncated file (wanted {nbytes} bytes, got {len(buf)})")
    return buf


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Parse a big-endian IDX image/label pair; pixel values divided by 255."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, str(images_path)))
        if magic != IMAGE_MAGIC:
            raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}")
        raw = _read_exact(fh, count * rows * cols, str(images_path))
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, str(labels_path)))
        if magic != LABEL_MAGIC:
            raise FormatError(f"{labels_path}: bad label magic 0x{magic:08x}")
        raw = _read_exact(fh, label_count, str(labels_path))
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if label_count != count:
        raise FormatError(f"image count {count} != label count {label_count}")
    if len(labels) and labels.max() >= num_classes:
        raise FormatError(f"label value {labels.max()} out of range for {num_classes} classes")
    return Dataset(
        features=pixels.astype(np.float64) / 255.0,
        labels=labels,
        num_classes=num_classes,
        provenance="idx_file",
    )


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write an IDX pair; features must already lie in [0, 1] (see quantize_for_idx)."""
    if ds.features.min() < 0.0 or ds.features.max() > 1.0:
        raise FormatError("features must be in [0, 1] to serialize as IDX bytes")
    if ds.num_classes > 256:
        raise FormatError("IDX labels are single bytes; num_classes must be <= 256")
    pixels = np.round(ds.features * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, ds.n, ds.dim, 1))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, ds.n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def quantize_for_idx(ds: Dataset) -> Dataset:
    """Min-max scale features into [0, 1] and snap them to the 1/255 grid.

    The returned dataset round-trips exactly through write_idx/load_idx.
    """
    lo = ds.features.min()
    hi = ds.features.max()
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((ds.features - lo) / span, 0.0, 1.0)
    snapped = np.round(scaled * 255.0) / 255.0
    return Dataset(snapped, ds.labels.copy(), ds.num_classes, ds.provenance)


def class_counts(n: int, num_classes: int, skew: float) -> list[int]:
    """Per-class sample counts: equal at skew=0, geometric ratio (1-skew) otherwise.

    Counts are renormalized to sum to n with largest-remainder rounding.
    """
    ratios = [(1.0 - skew) ** c for c in range(num_classes)]
    total = sum(ratios)
    raw = [n * r / total for r in ratios]
    counts = [int(x) for x in raw]
    leftovers = sorted(
        range(num_classes), key=lambda c: (-(raw[c] - counts[c]), c)
    )
    for c in leftovers[: n - sum(counts)]:
        counts[c] += 1
    return counts


def gen_synthetic(
    seed: int,
    n: int,
    num_classes: int,
    dim: int,
    skew: float,
    class_sep: float = 4.0,
    feature_scale: float = 1.0,
) -> Dataset:
    """Gaussian blobs with one mean per class on a scaled simplex.

    skew=0 gives balanced class counts (IID surrogate); skew in (0, 1] gives a
    geometric class imbalance (non-IID surrogate). feature_scale multiplies the
    whole matrix, shrinking feature norms in high dimension so step sizes tuned
    for pixel-range data stay stable. Deterministic per seed.
    """
    if n < num_classes:
        raise AllocationError(f"n={n} smaller than num_classes={num_classes}")
    if not 0.0 <= skew <= 1.0:
        raise AllocationError(f"skew must lie in [0, 1], got {skew}")
    if feature_scale <= 0:
        raise AllocationError(f"feature_scale must be positive, got {feature_scale}")
    rng = np.random.default_rng(seed)
    counts = class_counts(n, num_classes, skew)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), counts)
    means = np.zeros((num_classes, dim))
    for c in range(num_classes):
        means[c, c % dim] = class_sep
    features = (means[labels] + rng.standard_normal((n, dim))) * feature_scale
    order = rng.permutation(n)
    provenance = "synthetic_iid" if skew == 0.0 else "synthetic_noniid"
    return Dataset(features[order], labels[order], num_classes, provenance)


def split_train_test(ds: Dataset, train_frac: float, seed: int):
    """Seeded shuffle then split: floor(N * train_frac) rows train, rest test."""
    if not 0.0 < train_frac < 1.0:
        raise AllocationError(f"train_frac must lie in (0, 1), got {train_frac}")
    perm = np.random.default_rng(seed).permutation(ds.n)
    n_train = int(ds.n * train_frac)
    tr, te = perm[:n_train], perm[n_train:]
    make = lambda idx: Dataset(ds.features[idx], ds.labels[idx], ds.num_classes, ds.provenance)
    return make(tr), make(te)


def take_shard(ds: Dataset, dss: int, rng_seed) -> Shard:
    """Sample dss row indices uniformly without replacement, deterministic per seed.

    Callers advance the seed between allocation rounds; workers never hold the
    full dataset, so shards from different draws may overlap.
    """
    if dss < 1 or dss > ds.n:
        raise AllocationError(f"dss={dss} outside [1, {ds.n}]")
    rng = np.random.default_rng(rng_seed)
    return Shard(indices=rng.choice(ds.n, size=dss, replace=False))


def export_csv(ds: Dataset, path) -> None:
    """Write the dataset as CSV with header label,f0..f{d-1} (atomic replace)."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"f{i}" for i in range(ds.dim)) + "\n")
        for y, row in zip(ds.labels, ds.features):
            fh.write(f"{int(y)}," + ",".join(repr(float(v)) for v in row) + "\n")
    os.replace(tmp, path)
