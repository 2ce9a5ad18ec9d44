"""Loaders for the IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary formats,
plus seeded batch sampling for both training regimes."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataFormatError, PairingError, TruncationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3

DATASETS = ("mnist", "fashion-mnist", "cifar10")

# file roles inside a dataset directory; a ".gz" suffix is also accepted
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass
class ImageDataset:
    """Raw uint8 images in ``(N, H, W, C)`` layout with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise PairingError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[indices], self.labels[indices], self.name, self.split)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncationError(f"{path}: {len(raw)} bytes is shorter than the IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise TruncationError(f"{path}: payload has {payload} bytes, header declares {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def load_idx(images_path, labels_path, name="", split="") -> ImageDataset:
    """Read a pair of IDX files (optionally gzipped)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise PairingError(f"{images_path} has {len(images)} images, {labels_path} has {len(labels)} labels")
    return ImageDataset(images[..., None], labels.astype(np.int64), name, split)


def load_cifar10(batch_files, name="cifar10", split="") -> ImageDataset:
    """Read CIFAR-10 binary batches into ``(N, 32, 32, 3)`` HWC images."""
    images, labels = [], []
    for path in batch_files:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise TruncationError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = records[:, 0].astype(np.int64)
        if lab.size and lab.max() > 9:
            raise DataFormatError(f"{path}: label {lab.max()} out of range 0..9")
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.append(lab)
    if not images:
        return ImageDataset(np.zeros((0, 32, 32, 3), np.uint8), np.zeros(0, np.int64), name, split)
    return ImageDataset(np.concatenate(images), np.concatenate(labels), name, split)


def _find(directory: Path, filename: str) -> Path:
    for candidate in (filename, filename + ".gz"):
        for base in (directory, directory / "cifar-10-batches-bin"):
            if (base / candidate).is_file():
                return base / candidate
    raise FileNotFoundError(f"{filename} not found in {directory}")


def load_dataset(name: str, data_dir, split: str = "train") -> ImageDataset:
    """Load one split of a named dataset from a directory of distribution files.

    MNIST-style directories hold ``train-images-idx3-ubyte``,
    ``train-labels-idx1-ubyte``, ``t10k-images-idx3-ubyte`` and
    ``t10k-labels-idx1-ubyte`` (gzipped or not). CIFAR-10 directories hold
    ``data_batch_1.bin`` .. ``data_batch_5.bin`` and ``test_batch.bin``,
    possibly under ``cifar-10-batches-bin/``.
    """
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    directory = Path(data_dir)
    if name == "cifar10":
        return load_cifar10([_find(directory, f) for f in CIFAR_FILES[split]], name, split)
    img, lab = IDX_FILES[split]
    return load_idx(_find(directory, img), _find(directory, lab), name, split)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(N, H, W[, 1])`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        images = images[..., 0]
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def normalize(images) -> np.ndarray:
    """Scale uint8 pixels to float32 in [0, 1]."""
    return np.asarray(images, dtype=np.float32) / np.float32(255.0)


def seeded_subset(ds: ImageDataset, size: int | None, seed: int) -> ImageDataset:
    """Reproducible random subset of ``size`` items (the full set when None)."""
    if size is None or size >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    return ds.subset(np.sort(rng.choice(len(ds), size=size, replace=False)))


@dataclass(frozen=True)
class BatchPlan:
    """How to cut an epoch into batches.

    ``shuffled`` visits every sample once per epoch. ``balanced`` draws
    ``classes_per_batch`` distinct classes and ``samples_per_class`` samples
    of each, so every sample has a positive partner; a class smaller than
    ``samples_per_class`` is sampled with replacement.
    """

    mode: str = "shuffled"
    batch_size: int = 64
    seed: int = 0
    classes_per_batch: int = 8
    samples_per_class: int = 8

    def __post_init__(self):
        if self.mode not in ("shuffled", "balanced"):
            raise ConfigError(f"mode must be 'shuffled' or 'balanced', got {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode == "balanced":
            if self.samples_per_class < 2 or self.classes_per_batch < 1:
                raise ConfigError("balanced batches need >= 2 samples per class")
            if self.classes_per_batch * self.samples_per_class != self.batch_size:
                raise ConfigError(
                    f"classes_per_batch x samples_per_class ({self.classes_per_batch} x "
                    f"{self.samples_per_class}) must equal batch_size ({self.batch_size})"
                )

    @classmethod
    def for_loss(cls, loss: str, batch_size=64, seed=0, classes_per_batch=None):
        if loss == "ce":
            return cls("shuffled", batch_size, seed)
        p = classes_per_batch or 8
        if batch_size % p:
            raise ConfigError(f"batch_size {batch_size} is not divisible by {p} classes per batch")
        return cls("balanced", batch_size, seed, p, batch_size // p)


def epoch_indices(labels, plan: BatchPlan, epoch: int = 0):
    """Index arrays of one epoch's batches; depends only on (seed, epoch)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([plan.seed, epoch])
    n = len(labels)
    if plan.mode == "shuffled":
        order = rng.permutation(n)
        return [order[i : i + plan.batch_size] for i in range(0, n, plan.batch_size)]

    classes = np.unique(labels)
    if len(classes) < plan.classes_per_batch:
        raise ConfigError(
            f"balanced batches need {plan.classes_per_batch} classes, dataset has {len(classes)}"
        )
    members = {c: np.flatnonzero(labels == c) for c in classes}
    batches = []
    for _ in range(max(1, n // plan.batch_size)):
        chosen = rng.choice(classes, size=plan.classes_per_batch, replace=False)
        parts = []
        for c in chosen:
            pool = members[c]
            replace = len(pool) < plan.samples_per_class
            parts.append(rng.choice(pool, size=plan.samples_per_class, replace=replace))
        batches.append(np.concatenate(parts))
    return batches


def sample_batches(ds: ImageDataset, plan: BatchPlan, epoch: int = 0):
    """Yield ``(images, labels)`` batches; images are normalized float32."""
    for idx in epoch_indices(ds.labels, plan, epoch):
        yield normalize(ds.images[idx]), ds.labels[idx]
