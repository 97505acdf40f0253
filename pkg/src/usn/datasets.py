"""Dataset loading: IDX image files (MNIST, Fashion-MNIST), numeric CSV, synthetic blobs.

Every loader returns a :class:`Dataset` with feature-major features
``(n_features, n_samples)`` and one-hot labels ``(n_classes, n_samples)``.
"""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from usn import _seeding

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DatasetError("features and labels must be 2-D")
        if self.features.shape[1] != self.labels.shape[1]:
            raise DatasetError(
                f"{self.features.shape[1]} feature columns vs {self.labels.shape[1]} label columns"
            )
        if self.labels.shape[0] != len(self.class_names):
            raise DatasetError("one label row per class name required")

    @property
    def n_samples(self) -> int:
        return self.features.shape[1]

    @property
    def n_features(self) -> int:
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[0]

    def class_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=0)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[:, idx], self.labels[:, idx], self.class_names)


def one_hot(index: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((n_classes, index.shape[0]), dtype=dtype)
    out[index, np.arange(index.shape[0])] = 1
    return out


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(data: bytes, magic: int, path) -> np.ndarray:
    if len(data) < 4:
        raise DatasetError(f"{path}: truncated magic number at byte 0")
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise DatasetError(f"{path}: bad magic 0x{found:08x} at byte 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetError(f"{path}: truncated dimension header at byte {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    need = int(np.prod(dims, dtype=np.int64))
    have = len(data) - header
    if have < need:
        raise DatasetError(
            f"{path}: truncated payload at byte {len(data)}, expected {header + need} bytes"
        )
    if have > need:
        raise DatasetError(f"{path}: {have - need} unexpected trailing bytes at byte {header + need}")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1] by /255.

    Files ending in ``.gz`` are decompressed transparently.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(
            f"{images.shape[0]} images but {labels.shape[0]} labels ({images_path}, {labels_path})"
        )
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    features = images.reshape(images.shape[0], -1).T.astype(np.float32) / np.float32(255.0)
    return Dataset(
        np.ascontiguousarray(features),
        one_hot(labels.astype(np.int64), n_classes),
        tuple(str(i) for i in range(n_classes)),
    )


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise DatasetError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, split: str = "train") -> Dataset:
    """Load the official ``train`` or ``test`` split from a directory of IDX files."""
    directory = Path(directory)
    img, lab = MNIST_FILES[split]
    return load_idx(_find(directory, img), _find(directory, lab), n_classes=10)


def default_mnist_dir() -> Path:
    """``$USN_MNIST_DIR`` if set, else ``data/mnist`` at the repository root."""
    env = os.environ.get("USN_MNIST_DIR")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data" / "mnist"


def load_csv(path, label_column) -> Dataset:
    """Numeric CSV with a header row; ``label_column`` is a header name or index.

    Label values are one-hot encoded over their distinct values sorted as
    strings.
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if label_column not in header:
            raise DatasetError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
    else:
        li = int(label_column)
        if not -len(header) <= li < len(header):
            raise DatasetError(f"{path}: label column {li} out of range")
        li %= len(header)
    if not body:
        raise DatasetError(f"{path}: no data rows")
    feats, labels = [], []
    for n, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {n} has {len(row)} fields, expected {len(header)}")
        labels.append(row[li].strip())
        try:
            feats.append([float(v) for i, v in enumerate(row) if i != li])
        except ValueError as exc:
            raise DatasetError(f"{path}: row {n}: non-numeric feature ({exc})") from None
    x = np.array(feats, dtype=np.float32).T.reshape(len(header) - 1, len(body))
    if not np.all(np.isfinite(x)):
        raise DatasetError(f"{path}: non-finite feature values")
    names = sorted(set(labels))
    lookup = {name: i for i, name in enumerate(names)}
    idx = np.array([lookup[v] for v in labels], dtype=np.int64)
    return Dataset(np.ascontiguousarray(x), one_hot(idx, len(names)), tuple(names))


def subsample_split(dataset: Dataset, n_train: int, n_val: int, seed: int, stratify: bool = False):
    """Seeded disjoint ``(train, validation)`` subsets of ``dataset``."""
    n = dataset.n_samples
    if n_train < 0 or n_val < 0 or n_train + n_val > n:
        raise DatasetError(f"cannot draw {n_train} + {n_val} samples from {n}")
    rng = _seeding.make_rng(seed, _seeding.SPLIT)
    if not stratify:
        perm = rng.permutation(n)
        return dataset.take(np.sort(perm[:n_train])), dataset.take(np.sort(perm[n_train : n_train + n_val]))
    # per-class quotas proportional to class frequency, largest remainders first
    cls = dataset.class_indices()
    counts = np.bincount(cls, minlength=dataset.n_classes)
    picks = []
    for want in (n_train, n_val):
        exact = counts * (want / n)
        quota = np.floor(exact).astype(int)
        short = want - quota.sum()
        quota[np.argsort(-(exact - quota), kind="stable")[:short]] += 1
        picks.append(quota)
    train_idx, val_idx = [], []
    for c in range(dataset.n_classes):
        members = rng.permutation(np.flatnonzero(cls == c))
        a, b = picks[0][c], picks[1][c]
        train_idx.append(members[:a])
        val_idx.append(members[a : a + b])
    return (
        dataset.take(np.sort(np.concatenate(train_idx))),
        dataset.take(np.sort(np.concatenate(val_idx))),
    )


def synthetic_blobs(n_classes: int, n_features: int, n_per_class: int, separation: float, seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian clusters.

    Cluster centres are drawn at random and rejected until every pair is at
    least ``separation`` standard deviations apart.
    """
    if min(n_classes, n_features, n_per_class) < 1 or separation <= 0:
        raise ValueError("all blob parameters must be positive")
    rng = _seeding.make_rng(seed)
    # two N(0, s^2 I) points in k dims lie about s * sqrt(2k) apart
    scale = separation / np.sqrt(2.0 * n_features)
    for _ in range(1000):
        centers = rng.normal(scale=scale, size=(n_classes, n_features))
        if n_classes == 1:
            break
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if d[np.triu_indices(n_classes, 1)].min() >= separation:
            break
        scale *= 1.1
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + rng.normal(size=(labels.shape[0], n_features))
    perm = rng.permutation(labels.shape[0])
    return Dataset(
        np.ascontiguousarray(x[perm].T.astype(np.float32)),
        one_hot(labels[perm], n_classes),
        tuple(str(i) for i in range(n_classes)),
    )
