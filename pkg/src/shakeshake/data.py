"""CIFAR-10 binary ingestion, augmentation and a synthetic stand-in dataset."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, UsageError

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
PAD = 4


@dataclass
class LabeledImage:
    label: int
    pixels: np.ndarray  # (3, H, W), values in [0, 1]


class ImageDataset:
    """Images stored as one ``(N, 3, H, W)`` array in [0, 1] plus int labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, num_classes: int = 10):
        images = np.asarray(images)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[0] != labels.shape[0]:
            raise ValueError(f"images {images.shape} and labels {labels.shape} disagree")
        self.images = images
        self.labels = labels
        self.num_classes = num_classes

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(int(self.labels[i]), self.images[i])

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, n: int | None) -> "ImageDataset":
        if n is None or n >= len(self):
            return self
        return ImageDataset(self.images[:n], self.labels[:n], self.num_classes)

    @classmethod
    def from_items(cls, items: list[LabeledImage], num_classes: int = 10) -> "ImageDataset":
        if not items:
            return cls(np.zeros((0, *IMAGE_SHAPE), np.float32), np.zeros(0, np.int64), num_classes)
        return cls(np.stack([it.pixels for it in items]), np.array([it.label for it in items]), num_classes)


def read_cifar10_bin(path) -> ImageDataset:
    """Parse one CIFAR-10 binary batch file (label byte + 3072 RGB-planar bytes)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / np.float32(255.0)
    return ImageDataset(images, labels, 10)


def write_cifar10_bin(path, dataset: ImageDataset) -> None:
    """Inverse of :func:`read_cifar10_bin`; pixels are rounded back to bytes."""
    if dataset.images.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"CIFAR-10 records must be {IMAGE_SHAPE}, got {dataset.images.shape[1:]}")
    n = len(dataset)
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = dataset.labels
    out[:, 1:] = np.rint(np.clip(dataset.images, 0, 1) * 255.0).reshape(n, -1)
    out.tofile(path)


def load_cifar10(root, train_files: int = 5) -> tuple[ImageDataset, ImageDataset]:
    """Read ``data_batch_{1..5}.bin`` and ``test_batch.bin`` from ``root``."""
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts = [read_cifar10_bin(root / f"data_batch_{i}.bin") for i in range(1, train_files + 1)]
    train = ImageDataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts])
    )
    return train, read_cifar10_bin(root / "test_batch.bin")


def find_cifar10(explicit=None) -> Path | None:
    """Locate CIFAR-10 binaries from ``explicit`` or ``$SHAKESHAKE_CIFAR10_DIR``."""
    for cand in (explicit, os.environ.get("SHAKESHAKE_CIFAR10_DIR")):
        if not cand:
            continue
        p = Path(cand)
        for root in (p, p / "cifar-10-batches-bin"):
            if (root / "data_batch_1.bin").exists() and (root / "test_batch.bin").exists():
                return root
    return None


@dataclass(frozen=True)
class DatasetStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,)

    @classmethod
    def compute(cls, dataset: ImageDataset) -> "DatasetStats":
        x = dataset.images.astype(np.float64)
        std = x.std(axis=(0, 2, 3))
        if np.any(std <= 0):
            raise ValueError("dataset has a constant channel; cannot normalize")
        return cls(x.mean(axis=(0, 2, 3)), std)

    def normalize(self, images: np.ndarray, dtype=None) -> np.ndarray:
        dtype = dtype or images.dtype
        out = (images - self.mean.reshape(1, -1, 1, 1)) / self.std.reshape(1, -1, 1, 1)
        return out.astype(dtype, copy=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def translate_flip(pixels: np.ndarray, oy: int, ox: int, flip: bool) -> np.ndarray:
    """Crop the zero-padded image at offset (oy, ox), then optionally mirror."""
    c, h, w = pixels.shape
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), dtype=pixels.dtype)
    padded[:, PAD : PAD + h, PAD : PAD + w] = pixels
    out = padded[:, oy : oy + h, ox : ox + w]
    return np.ascontiguousarray(out[:, :, ::-1] if flip else out)


def augment(image: LabeledImage, rng: np.random.Generator) -> LabeledImage:
    """Random pad-4 translation followed by a horizontal flip with probability 0.5."""
    oy, ox = rng.integers(0, 2 * PAD + 1, size=2)
    flip = bool(rng.random() < 0.5)
    return LabeledImage(image.label, translate_flip(image.pixels, int(oy), int(ox), flip))


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`augment`; draws are taken image by image in order."""
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD), dtype=images.dtype)
    padded[:, :, PAD : PAD + h, PAD : PAD + w] = images
    out = np.empty_like(images)
    for i in range(n):
        oy, ox = rng.integers(0, 2 * PAD + 1, size=2)
        flip = rng.random() < 0.5
        crop = padded[i, :, oy : oy + h, ox : ox + w]
        out[i] = crop[:, :, ::-1] if flip else crop
    return out


def synthetic_dataset(
    num_classes: int, n: int, seed: int, image_size: int = 32, noise: float = 0.1
) -> ImageDataset:
    """Class-conditional Gaussian blobs: each class has its own centre and colour.

    Labels are balanced (counts differ by at most one) and shuffled.
    """
    if num_classes < 2:
        raise ValueError("synthetic_dataset needs at least 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    centres = rng.uniform(0.25, 0.75, size=(num_classes, 2)) * image_size
    colours = rng.uniform(-1.0, 1.0, size=(num_classes, 3))
    if num_classes == 2:
        colours[1] = -colours[0]
    sigma = image_size / 6.0
    labels = rng.permutation(np.arange(n) % num_classes)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i, k in enumerate(labels):
        jitter = rng.normal(0.0, image_size / 16.0, size=2)
        cy, cx = centres[k] + jitter
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        img = 0.5 + 0.4 * colours[k][:, None, None] * blob[None]
        img += rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(images, labels, num_classes)


def batch_iter(
    dataset: ImageDataset,
    batch_size: int,
    shuffle: bool,
    rng: np.random.Generator | None = None,
    augment: bool = False,
    stats: DatasetStats | None = None,
    dtype=np.float32,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` mini-batches; the last one may be short.

    Shuffling and augmentation both draw from ``rng`` (order first, then
    per-image augmentation, batch by batch).
    """
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot iterate over an empty dataset")
    if (shuffle or augment) and rng is None:
        raise UsageError("shuffle/augment need an rng")
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = dataset.images[idx]
        if augment:
            x = augment_batch(x, rng)
        if stats is not None:
            x = stats.normalize(x)
        yield x.astype(dtype, copy=False), dataset.labels[idx]
