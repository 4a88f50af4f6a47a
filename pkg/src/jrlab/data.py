"""Datasets: IDX parsing and writing, preprocessing, resampling, synthetic data."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxParseError(ValueError):
    """Malformed IDX file."""


class BadMagicError(IdxParseError):
    pass


class TruncatedFileError(IdxParseError):
    pass


class CountMismatchError(IdxParseError):
    pass


class DataError(ValueError):
    """A dataset cannot satisfy the request (e.g. too few examples per class)."""


@dataclass(frozen=True)
class Normalizer:
    """Affine map from raw pixels to network inputs: ``(x - mean) / std``."""

    mean: float = MNIST_MEAN
    std: float = MNIST_STD

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.std)) or self.std <= 0:
            raise ValueError(f"invalid preprocessing stats mean={self.mean} std={self.std}")

    def __call__(self, x_raw):
        return (np.asarray(x_raw) - self.mean) / self.std

    def inverse(self, x):
        return np.asarray(x) * self.std + self.mean

    @property
    def input_scale(self) -> float:
        """d(network input)/d(raw pixel)."""
        return 1.0 / self.std


def preprocess(x_raw, mean: float = MNIST_MEAN, std: float = MNIST_STD):
    return Normalizer(mean, std)(x_raw)


def unpreprocess(x, mean: float = MNIST_MEAN, std: float = MNIST_STD):
    return Normalizer(mean, std).inverse(x)


@dataclass
class Dataset:
    """Raw images in ``[0, 1]`` with integer labels and preprocessing stats."""

    images: np.ndarray  # (N, I) raw
    labels: np.ndarray  # (N,)
    n_classes: int = 10
    normalizer: Normalizer = field(default_factory=Normalizer)
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            self.images = self.images.reshape(self.images.shape[0], -1)
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        self._inputs = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.images.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        """Preprocessed network inputs (cached)."""
        if self._inputs is None:
            self._inputs = self.normalizer(self.images)
        return self._inputs

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.images[idx], self.labels[idx], self.n_classes, self.normalizer, self.name
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def _read(path) -> bytes:
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as fh:
        return fh.read()


def parse_idx_images(data: bytes) -> np.ndarray:
    if len(data) < 16:
        raise TruncatedFileError(f"image header needs 16 bytes, got {len(data)}")
    magic, n, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IMAGE_MAGIC:
        raise BadMagicError(f"image magic at offset 0 is {magic}, expected {IMAGE_MAGIC}")
    need = 16 + n * rows * cols
    if len(data) < need:
        raise TruncatedFileError(f"image payload needs {need} bytes, got {len(data)}")
    pix = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pix.reshape(n, rows * cols)


def parse_idx_labels(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise TruncatedFileError(f"label header needs 8 bytes, got {len(data)}")
    magic, n = struct.unpack_from(">II", data, 0)
    if magic != LABEL_MAGIC:
        raise BadMagicError(f"label magic at offset 0 is {magic}, expected {LABEL_MAGIC}")
    if len(data) < 8 + n:
        raise TruncatedFileError(f"label payload needs {8 + n} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped); pixels scaled by 1/255."""
    pix = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if pix.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{pix.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(pix / 255.0, labels, n_classes, name=str(images_path))


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels, shape=(28, 28)):
    """Write uint8 images ``(N, rows*cols)`` and labels in IDX layout."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    rows, cols = shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, images_u8.shape[0], rows, cols))
        fh.write(images_u8.reshape(images_u8.shape[0], -1).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def bilinear_upsample(img: np.ndarray, size: int = 28) -> np.ndarray:
    """Align-corners bilinear resize of a square image to ``size x size``."""
    img = np.asarray(img, dtype=np.float64)
    n = img.shape[0]
    if img.ndim != 2 or img.shape[1] != n:
        raise ValueError(f"expected a square image, got {img.shape}")
    if n >= size:
        raise ValueError(f"input {n}x{n} is not smaller than target {size}x{size}")
    pos = np.linspace(0.0, n - 1, size)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    t = pos - i0
    rows = img[i0] * (1 - t)[:, None] + img[i0 + 1] * t[:, None]
    return rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]


def synthetic_blobs(
    n_per_class: int,
    n_classes: int = 10,
    width: int = 784,
    seed: int = 0,
    noise: float = 0.25,
) -> Dataset:
    """Seeded Gaussian blobs clipped to ``[0, 1]``; one random center per class."""
    # keyed apart from weight-init streams that share the integer seed
    rng = np.random.default_rng([seed, 0xB10B])
    centers = rng.uniform(0.0, 1.0, size=(n_classes, width))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = centers[labels] + noise * rng.standard_normal((labels.size, width))
    perm = rng.permutation(labels.size)
    return Dataset(np.clip(images[perm], 0.0, 1.0), labels[perm], n_classes, name="synthetic")


def split_per_class(dataset: Dataset, n_test_per_class: int, seed: int = 0):
    """Stratified train/test split; returns ``(train, test)``."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        if idx.size <= n_test_per_class:
            raise DataError(f"class {c} has only {idx.size} examples")
        test_idx.append(idx[:n_test_per_class])
        train_idx.append(idx[n_test_per_class:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)


def data_dir() -> Path | None:
    root = os.environ.get("JRLAB_DATA_DIR")
    return Path(root) if root else None


def find_mnist(root=None):
    """Locate standard MNIST IDX files under ``root`` (or ``$JRLAB_DATA_DIR``).

    Returns ``(train, test)`` datasets or None when the files are absent.
    """
    root = Path(root) if root is not None else data_dir()
    if root is None:
        return None
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    found = {}
    for split, (im, lb) in names.items():
        for suffix in ("", ".gz"):
            ip, lp = root / (im + suffix), root / (lb + suffix)
            if ip.exists() and lp.exists():
                found[split] = load_idx(ip, lp)
                break
        else:
            return None
    return found["train"], found["test"]


def export_mnist5k(dest) -> tuple[Path, Path]:
    """Write the 5,000-image MNIST subset bundled with ``mlxtend`` as IDX files.

    Needs the optional ``mlxtend`` package.  Returns the image and label paths.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    ip, lp = dest / "mnist5k-images-idx3-ubyte", dest / "mnist5k-labels-idx1-ubyte"
    if not (ip.exists() and lp.exists()):
        write_idx(ip, lp, X.astype(np.uint8), y.astype(np.uint8))
    return ip, lp


def load_mnist5k(cache_dir=None, n_test_per_class: int = 100, seed: int = 0):
    """Stratified train/test split of the bundled 5k MNIST subset (via IDX)."""
    if cache_dir is None:
        cache_dir = data_dir() or Path.home() / ".cache" / "jrlab"
    ip, lp = export_mnist5k(cache_dir)
    return split_per_class(load_idx(ip, lp), n_test_per_class, seed)
