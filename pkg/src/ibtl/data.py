"""Datasets, synthetic generators, splits, label corruption and file I/O.

CSV layout: header ``id,label,f0,...,f{d-1}``, one sample per row.
IDX layout (MNIST): big-endian, images magic 0x00000803 + (count, rows, cols),
labels magic 0x00000801 + count, then unsigned bytes.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import RngStream

__all__ = [
    "Dataset",
    "DomainPair",
    "DataFormatError",
    "gen_blobs",
    "blob_means",
    "gen_domain_pair",
    "split_validation",
    "corrupt_labels",
    "build_skewed_test",
    "augment_flip",
    "augment_rot90",
    "load_csv",
    "write_csv",
    "load_idx",
    "write_idx",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True, ndmin=2)
        y = np.array(self.labels, dtype=np.int64, copy=True).ravel()
        ids = np.array(self.ids, dtype=np.int64, copy=True).ravel()
        for a in (X, y, ids):
            a.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "ids", ids)
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", (int(self.image_shape[0]), int(self.image_shape[1])))
        self.validate()

    def validate(self) -> None:
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValueError(f"rows/labels/ids disagree: {n}, {self.labels.shape}, {self.ids.shape}")
        if np.unique(self.ids).size != n:
            raise ValueError("sample ids must be unique")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.image_shape is not None and self.image_shape[0] * self.image_shape[1] != self.dim:
            raise ValueError(f"image_shape {self.image_shape} does not match feature dim {self.dim}")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.size == 0:
            index = index.astype(np.intp)
        return Dataset(self.features[index], self.labels[index], self.ids[index], self.num_classes, self.image_shape)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.features, labels, self.ids, self.num_classes, self.image_shape)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<qqq", len(self), self.dim, self.num_classes))
        h.update(self.ids.astype("<i8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(self.features.astype("<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class DomainPair:
    source: Dataset
    target: Dataset
    shift: dict = field(default_factory=dict)


def blob_means(K: int, d: int, spread: float, rng: RngStream) -> np.ndarray:
    return spread * rng.normal(size=(K, d))


def gen_blobs(
    K: int,
    n: int,
    d: int,
    spread: float,
    noise: float,
    rng: RngStream,
    means: np.ndarray | None = None,
    id_start: int = 0,
) -> Dataset:
    """Gaussian blobs with balanced classes (counts differ by at most one)."""
    if K < 2 or n < K:
        raise ValueError(f"need K >= 2 and n >= K, got K={K}, n={n}")
    if means is None:
        means = blob_means(K, d, spread, rng)
    means = np.asarray(means, dtype=np.float64)
    labels = rng.permutation(np.arange(n) % K)
    X = means[labels] + noise * rng.normal(size=(n, d))
    return Dataset(X, labels, np.arange(id_start, id_start + n), K)


def _rotate_layout(means: np.ndarray, angle: float) -> np.ndarray:
    if means.shape[1] < 2 or angle == 0.0:
        return means.copy()
    c, s = np.cos(angle), np.sin(angle)
    out = means.copy()
    out[:, 0] = c * means[:, 0] - s * means[:, 1]
    out[:, 1] = s * means[:, 0] + c * means[:, 1]
    return out


def gen_domain_pair(
    K: int,
    d: int,
    n_source: int,
    n_target: int,
    rng: RngStream,
    spread: float = 3.0,
    noise: float = 1.0,
    mean_offset: float = 0.0,
    rotation: float = 0.0,
    noise_scale: float = 1.0,
) -> DomainPair:
    """Source and target blobs sharing class means up to a controlled shift.

    The target means are rotated by ``rotation`` radians in the plane of the
    first two features and translated by ``mean_offset`` along a random unit
    direction; target noise is ``noise * noise_scale``.
    """
    means = blob_means(K, d, spread, rng.child("means"))
    direction = rng.child("offset").normal(size=d)
    direction /= np.linalg.norm(direction)
    target_means = _rotate_layout(means, rotation) + mean_offset * direction
    source = gen_blobs(K, n_source, d, spread, noise, rng.child("source"), means=means)
    target = gen_blobs(K, n_target, d, spread, noise * noise_scale, rng.child("target"), means=target_means)
    shift = {"mean_offset": mean_offset, "rotation": rotation, "noise_scale": noise_scale}
    return DomainPair(source, target, shift)


def split_validation(ds: Dataset, rng: RngStream, fraction: float = 0.10) -> tuple[Dataset, Dataset]:
    """Hold out max(1, floor(fraction * n)) samples, chosen uniformly without replacement."""
    n = len(ds)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split off a validation set, got {n}")
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    n_val = max(1, int(np.floor(fraction * n)))
    chosen = np.zeros(n, dtype=bool)
    chosen[rng.choice(n, size=n_val, replace=False)] = True
    return ds.subset(np.flatnonzero(~chosen)), ds.subset(np.flatnonzero(chosen))


def corrupt_labels(ds: Dataset, fraction: float, rng: RngStream) -> tuple[Dataset, set[int]]:
    """Flip floor(fraction * n) labels to a uniformly drawn different class."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    K = ds.num_classes
    n_flip = int(np.floor(fraction * len(ds)))
    rows = np.sort(rng.choice(len(ds), size=n_flip, replace=False))
    labels = ds.labels.copy()
    labels[rows] = (labels[rows] + rng.integers(1, K, size=n_flip)) % K
    return ds.with_labels(labels), {int(i) for i in ds.ids[rows]}


def augment_flip(x, h: int, w: int) -> np.ndarray:
    x = np.asarray(x)
    if x.size != h * w:
        raise ValueError(f"vector of length {x.size} is not a {h}x{w} image")
    return x.reshape(h, w)[:, ::-1].ravel().copy()


def augment_rot90(x, h: int, w: int) -> np.ndarray:
    """Counter-clockwise quarter turn of a square image."""
    x = np.asarray(x)
    if h != w:
        raise ValueError(f"rot90 needs a square image, got {h}x{w}")
    if x.size != h * w:
        raise ValueError(f"vector of length {x.size} is not a {h}x{w} image")
    return np.rot90(x.reshape(h, w)).ravel().copy()


def build_skewed_test(
    ds: Dataset,
    majority_class: int,
    repeats: int,
    per_class: int,
    rng: RngStream,
    augmentation: str = "auto",
) -> Dataset:
    """Test set dominated by one class.

    Each of ``repeats`` rounds draws ``per_class`` distinct samples of the
    majority class and stores an augmented copy of each; rounds may reuse
    originals. Then ``per_class`` distinct samples of every other class are
    appended unchanged. Images are flipped or quarter-turned with equal
    probability (flip only if not square); tabular data gets Gaussian jitter
    with per-feature scale 0.05 * std.
    """
    K = ds.num_classes
    counts = ds.class_counts()
    if not 0 <= majority_class < K or counts[majority_class] == 0:
        raise ValueError(f"majority class {majority_class} is absent from the test set")
    if augmentation == "auto":
        augmentation = "image" if ds.image_shape is not None else "jitter"
    if augmentation == "image" and ds.image_shape is None:
        raise ValueError("image augmentation needs a dataset with image_shape")
    needed = {c: per_class for c in range(K)}
    if repeats == 0:
        needed[majority_class] = 0
    for c, m in needed.items():
        if counts[c] < m:
            raise ValueError(f"class {c} has {counts[c]} samples, need {m} distinct ones")

    pools = {c: np.flatnonzero(ds.labels == c) for c in range(K)}
    jitter = 0.05 * ds.features.std(axis=0)
    feats, labels = [], []
    for _ in range(repeats):
        for i in rng.choice(pools[majority_class], size=per_class, replace=False):
            x = ds.features[i]
            if augmentation == "image":
                h, w = ds.image_shape
                if h == w and rng.random() < 0.5:
                    x = augment_rot90(x, h, w)
                else:
                    x = augment_flip(x, h, w)
            else:
                x = x + jitter * rng.normal(size=x.size)
            feats.append(x)
            labels.append(majority_class)
    for c in range(K):
        if c == majority_class:
            continue
        for i in np.sort(rng.choice(pools[c], size=per_class, replace=False)):
            feats.append(ds.features[i])
            labels.append(c)
    X = np.array(feats).reshape(len(feats), ds.dim)
    return Dataset(X, labels, np.arange(len(labels)), K, ds.image_shape)


# ---------------------------------------------------------------- file I/O


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", *(f"f{j}" for j in range(ds.dim))])
        for i in range(len(ds)):
            w.writerow([int(ds.ids[i]), int(ds.labels[i]), *(repr(float(v)) for v in ds.features[i])])


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Read a dataset written by :func:`write_csv`. Features are taken verbatim."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = rows[0]
    if header[:2] != ["id", "label"]:
        raise DataFormatError(f"{path}: header must start with 'id,label', got {header[:2]}")
    d = len(header) - 2
    ids, labels, feats = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + 2:
            raise DataFormatError(f"{path}: row {lineno} has {len(row)} cells, expected {d + 2}")
        try:
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            feats.append([float(c) for c in row[2:]])
        except ValueError as exc:
            raise DataFormatError(f"{path}: non-numeric cell in row {lineno}: {exc}") from None
    if num_classes is None:
        num_classes = max(2, max(labels, default=0) + 1)
    X = np.array(feats, dtype=np.float64).reshape(len(feats), d)
    return Dataset(X, labels, ids, num_classes)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write an image dataset as IDX; features are mapped back to bytes by round(255 x)."""
    if ds.image_shape is None:
        raise ValueError("dataset has no image_shape")
    h, w = ds.image_shape
    pix = np.clip(np.rint(ds.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(ds), h, w))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(ds)))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """MNIST-style IDX pair; pixels are scaled to [0, 1] by /255."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    if len(img) < 16:
        raise DataFormatError(f"{images_path}: truncated header ({len(img)} bytes, need 16)")
    magic, n, h, w = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(img) != 16 + n * h * w:
        raise DataFormatError(f"{images_path}: expected {16 + n * h * w} bytes, found {len(img)} (payload starts at byte 16)")
    if len(lab) < 8:
        raise DataFormatError(f"{labels_path}: truncated header ({len(lab)} bytes, need 8)")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: bad magic 0x{lmagic:08x} at byte 0, expected 0x{IDX_LABELS_MAGIC:08x}")
    if ln != n:
        raise DataFormatError(f"{labels_path}: {ln} labels at byte 4 but {images_path} holds {n} images")
    if len(lab) != 8 + n:
        raise DataFormatError(f"{labels_path}: expected {8 + n} bytes, found {len(lab)}")
    X = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, h * w).astype(np.float64) / 255.0
    y = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(y.max(initial=0)) + 1)
    return Dataset(X, y, np.arange(n), num_classes, (h, w))
