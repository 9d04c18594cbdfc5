"""Dataset container, IDX (MNIST-format) ingestion and synthetic data.

IDX files are parsed strictly: the big-endian magic numbers (0x00000803
for image tensors, 0x00000801 for label vectors) are validated, as are the
declared dimensions against the actual payload, and errors carry byte
offsets. Gzip-compressed files are handled transparently. Pixels are
scaled to [0, 1] (byte 255 maps to exactly 1.0) and images flattened to
feature vectors.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .validation import as_float_matrix, as_labels

__all__ = [
    "Dataset",
    "load_mnist",
    "read_idx",
    "write_idx_images",
    "write_idx_labels",
    "generate_synthetic",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, integer labels and the number of classes."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = as_float_matrix(self.X, "X")
        y = as_labels(self.y, "y", num_classes=self.num_classes)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} rows of X for {y.shape[0]} labels")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return int(self.X.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.X.shape[1])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[indices], self.y[indices], self.num_classes)

    def head(self, n: int) -> "Dataset":
        return Dataset(self.X[:n], self.y[:n], self.num_classes)


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (optionally gzipped) into a uint8 array."""
    path = Path(path)
    data = _read_bytes(path)
    if len(data) < 4:
        raise ValueError(f"{path}: truncated header, only {len(data)} bytes")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise ValueError(
            f"{path}: bad magic 0x{magic:08x} at byte 0 "
            f"(expected 0x{IMAGE_MAGIC:08x} for images or 0x{LABEL_MAGIC:08x} for labels)"
        )
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise ValueError(
            f"{path}: truncated dimension header, need {header_len} bytes, have {len(data)}"
        )
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    expected = int(np.prod(dims))
    payload = len(data) - header_len
    if payload != expected:
        raise ValueError(
            f"{path}: payload of {payload} bytes starting at byte {header_len} "
            f"does not match declared shape {dims} ({expected} bytes)"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims)


def write_idx_images(path, images) -> None:
    """Write a (N, H, W) uint8 array in IDX image format."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be (N, H, W), got {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got {labels.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{directory} does not contain {stem}[.gz]")


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Load the four standard IDX files into (train, test) datasets."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    out = []
    for split in ("train", "test"):
        img_stem, lab_stem = _SPLIT_FILES[split]
        images = read_idx(_find(directory, img_stem))
        labels = read_idx(_find(directory, lab_stem))
        if images.ndim != 3:
            raise ValueError(f"{split}: image file does not hold a 3-D tensor")
        if labels.ndim != 1:
            raise ValueError(f"{split}: label file does not hold a vector")
        if images.shape[0] != labels.shape[0]:
            raise ValueError(
                f"{split}: {images.shape[0]} images but {labels.shape[0]} labels"
            )
        X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
        out.append(Dataset(X, labels.astype(np.int64), num_classes=10))
    return out[0], out[1]


def generate_synthetic(input_dim: int, num_classes: int, n_per_class: int,
                       spread: float, seed) -> Dataset:
    """Gaussian class blobs with seeded unit-normal means.

    Exactly n_per_class examples per class, shuffled deterministically;
    spread 0 collapses each class onto its mean.
    """
    if num_classes < 2 or input_dim < 2:
        raise ValueError("need num_classes >= 2 and input_dim >= 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(num_classes, input_dim))
    y = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    X = means[y] + spread * rng.normal(0.0, 1.0, size=(y.shape[0], input_dim))
    order = rng.permutation(y.shape[0])
    return Dataset(X[order], y[order], num_classes)
