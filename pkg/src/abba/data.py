"""Datasets for the two-phase fine-tuning experiment.

MNIST is read from the published IDX files (optionally gzipped); nothing is
downloaded. ``synthetic_blobs`` gives a dataset with the same layout for
runs without the files.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFileError, FormatError, ParameterError, ShapeError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
            raise ShapeError(f"features {f.shape} and labels {y.shape} do not describe the same samples")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ParameterError(f"labels must lie in [0, {self.class_count}), got range [{y.min()}, {y.max()}]")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise ParameterError("feature values must lie in [0, 1]")
        f.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataFileError(f"data file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse(raw: bytes, path, magic: int, ndims: int) -> tuple[tuple[int, ...], bytes]:
    header = 4 + 4 * ndims
    if len(raw) < 4:
        raise DataFileError(f"{path}: truncated header, expected at least {header} bytes, got {len(raw)}")
    found = struct.unpack(">i", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic number {found} (0x{found & 0xFFFFFFFF:08x}), expected {magic}")
    if len(raw) < header:
        raise DataFileError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndims}i", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise DataFileError(f"{path}: truncated file, expected {expected} bytes, got {len(raw)}")
    return dims, raw[header:expected]


def load_idx_images(path) -> np.ndarray:
    """``count x (rows*cols)`` float matrix with pixels scaled into [0, 1]."""
    (count, rows, cols), body = _parse(_read_bytes(path), path, IMAGE_MAGIC, 3)
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)
    return pixels.astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    (count,), body = _parse(_read_bytes(path), path, LABEL_MAGIC, 1)
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write ``count x rows x cols`` uint8 images. Used for test fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ShapeError(f"images must be count x rows x cols, got {images.shape}")
    Path(path).write_bytes(struct.pack(">4i", IMAGE_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8).ravel()
    Path(path).write_bytes(struct.pack(">2i", LABEL_MAGIC, labels.size) + labels.tobytes())


def _locate(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DataFileError(f"MNIST file not found: expected {directory / stem} (or .gz)")


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Train and test splits from a directory holding the four IDX files."""
    directory = Path(directory)
    paths = {k: _locate(directory, v) for k, v in MNIST_FILES.items()}
    train = Dataset(load_idx_images(paths["train_images"]), load_idx_labels(paths["train_labels"]), 10, "mnist-train")
    test = Dataset(load_idx_images(paths["test_images"]), load_idx_labels(paths["test_labels"]), 10, "mnist-test")
    return train, test


def filter_classes(d: Dataset, keep, remap: bool = True) -> Dataset:
    """Samples whose label is in ``keep``, in their original order.

    With ``remap`` the kept labels become ``0..k-1`` in ascending order of the
    original label.
    """
    keep = sorted({int(k) for k in keep})
    if not keep:
        raise ParameterError("keep must name at least one class")
    mask = np.isin(d.labels, keep)
    labels = d.labels[mask]
    count = d.class_count
    if remap:
        lookup = np.full(d.class_count, -1, dtype=np.int64)
        lookup[keep] = np.arange(len(keep))
        labels = lookup[labels]
        count = len(keep)
    return Dataset(d.features[mask], labels, count, f"{d.name}{keep}")


def synthetic_blobs(classes: int, per_class: int, dim: int, sigma: float, seed: int = 0, name: str = "blobs") -> Dataset:
    """Gaussian clusters around uniformly drawn class means.

    Features are mapped affinely into [0, 1] using the global min and max of
    the generated sample, so relative geometry is preserved. Samples are
    ordered class by class.
    """
    if classes < 1 or per_class < 1 or dim < 1:
        raise ParameterError("classes, per_class and dim must be positive")
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-1.0, 1.0, size=(classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + sigma * rng.standard_normal((labels.size, dim))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    return Dataset(np.clip(x, 0.0, 1.0), labels, classes, name)


def split(d: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified shuffle split into train and test parts."""
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(d.class_count):
        idx = np.flatnonzero(d.labels == c)
        rng.shuffle(idx)
        cut = int(round(test_fraction * idx.size))
        test_idx.append(idx[:cut])
        train_idx.append(idx[cut:])
    tr, te = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))
    return (
        Dataset(d.features[tr], d.labels[tr], d.class_count, f"{d.name}-train"),
        Dataset(d.features[te], d.labels[te], d.class_count, f"{d.name}-test"),
    )
