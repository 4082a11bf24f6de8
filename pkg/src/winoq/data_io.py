"""Dataset ingestion: IDX (MNIST), CIFAR-10 binary batches and a synthetic generator.

All loaders normalize pixels to [-1, 1] so the symmetric quantization grid is
centered on the data, and validate label ranges.  Values are immutable once
loaded.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_LEN = 3073  # 1 label byte + 3 * 32 * 32 pixels


class FormatError(ValueError):
    """Malformed dataset file."""


@dataclass(frozen=True)
class Dataset:
    """Images as float64 NCHW in [-1, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise FormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise FormatError(
                f"label {int(self.labels.max())} out of range for {self.num_classes} classes"
            )

    def __len__(self) -> int:
        return len(self.images)

    def split(self, val_fraction: float = 0.1, seed: int = 0):
        """Deterministic train/val split (default 90/10)."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        n_val = int(round(len(self) * val_fraction))
        val_idx, train_idx = order[:n_val], order[n_val:]
        train = Dataset(self.images[train_idx], self.labels[train_idx],
                        self.num_classes, self.name + "/train")
        val = Dataset(self.images[val_idx], self.labels[val_idx],
                      self.num_classes, self.name + "/val")
        return train, val


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse the big-endian IDX pair; pixels mapped [0, 255] -> [-1, 1]."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"bad image magic: expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"
            )
        raw = _read_exact(fh, n * rows * cols, "image data")
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"bad label magic: expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"
            )
        labels = np.frombuffer(_read_exact(fh, n_labels, "label data"), dtype=np.uint8)
    if n != n_labels:
        raise FormatError(f"{n} images but {n_labels} labels")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    images = pixels.astype(np.float64) / 127.5 - 1.0
    return Dataset(images, labels.astype(np.int64), num_classes=10, name="mnist")


def load_cifar10_bin(path) -> Dataset:
    """Parse a CIFAR-10 binary batch: records of 1 label byte + 3072 CHW pixels."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % CIFAR_RECORD_LEN != 0:
        raise FormatError(
            f"file length {len(raw)} is not a multiple of {CIFAR_RECORD_LEN}"
        )
    n = len(raw) // CIFAR_RECORD_LEN
    if n == 0:
        warnings.warn("empty CIFAR batch file")
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64),
                       num_classes=10, name="cifar10")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_LEN)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 127.5 - 1.0
    return Dataset(images, labels, num_classes=10, name="cifar10")


def gen_synthetic(classes: int, n_per_class: int, size: int, seed: int) -> Dataset:
    """Class-conditional oriented gratings: solvable by a small conv net,
    not linearly separable in pixel space (random phase kills pixel means).

    Each class k gets an orientation k*pi/classes and a frequency that steps
    with k; every sample draws its own phase and additive noise (sigma 0.1).
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    n = classes * n_per_class
    images = np.zeros((n, 1, size, size))
    labels = np.zeros(n, dtype=np.int64)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for k in range(classes):
        theta = np.pi * k / classes
        freq = 2.0 + 1.0 * (k % 2)  # cycles across the patch
        proj = (ii * np.cos(theta) + jj * np.sin(theta)) / size
        for s in range(n_per_class):
            idx = k * n_per_class + s
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(2.0 * np.pi * freq * proj + phase)
            noisy = 0.8 * wave + rng.normal(0.0, 0.1, (size, size))
            images[idx, 0] = np.clip(noisy, -1.0, 1.0)
            labels[idx] = k
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], num_classes=classes, name="synthetic")
