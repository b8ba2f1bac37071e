"""Dataset ingestion: CIFAR binary batches and a synthetic generator.

CIFAR-10 binary batches hold 3073-byte records (1 label byte, then
3 x 32 x 32 pixel bytes channel-major); a full batch file of 10000 records
is 30,730,000 bytes.  CIFAR-100 uses the same pixel payload behind two
label bytes (coarse then fine); pass ``label_bytes=2`` to read it.

The synthetic generator plants class-conditional Gaussian blobs on a gray
background, which makes the classes linearly separable by construction
with a configurable margin; it stands in for full-scale image data in
tests and desk-scale training runs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "DataFormatError",
    "SynthSpec",
    "load_cifar10",
    "load_cifar100",
    "parse_cifar_records",
    "synth_dataset",
]

_CIFAR_PIXELS = 3 * 32 * 32


class DataFormatError(ValueError):
    """Malformed dataset bytes (bad record size, out-of-range label, ...)."""


@dataclass
class Dataset:
    """Images ``(count, C, H, W)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError("images must be (count, C, H, W)")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("label count must match image count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]


def parse_cifar_records(buf: bytes, label_bytes: int = 1, num_classes: int = 10):
    """Decode raw CIFAR batch bytes -> (images in [0,1], labels).

    The label is the last of the ``label_bytes`` prefix bytes (CIFAR-100
    stores coarse then fine).
    """
    record = label_bytes + _CIFAR_PIXELS
    if len(buf) == 0 or len(buf) % record != 0:
        raise DataFormatError(
            f"file length {len(buf)} is not a positive multiple of the "
            f"{record}-byte record size"
        )
    n = len(buf) // record
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(n, record)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(
            f"label byte {int(labels.max())} exceeds class count {num_classes}"
        )
    images = arr[:, label_bytes:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _load_cifar_files(paths, label_bytes, num_classes, split):
    images, labels = [], []
    for p in paths:
        with open(p, "rb") as fh:
            im, lb = parse_cifar_records(fh.read(), label_bytes, num_classes)
        images.append(im)
        labels.append(lb)
    return Dataset(np.concatenate(images), np.concatenate(labels), num_classes, split=split)


def load_cifar10(path: str, split: str = "train") -> Dataset:
    """Load CIFAR-10 binary batches from a file or the standard directory layout.

    A directory is expected to contain ``data_batch_1..5.bin`` (train) or
    ``test_batch.bin`` (test); a file path is parsed as one batch.
    """
    if os.path.isdir(path):
        if split == "train":
            names = [f"data_batch_{i}.bin" for i in range(1, 6)]
        elif split == "test":
            names = ["test_batch.bin"]
        else:
            raise ValueError(f"unknown split {split!r}")
        paths = [os.path.join(path, n) for n in names]
        missing = [p for p in paths if not os.path.exists(p)]
        if missing:
            raise FileNotFoundError(f"missing batch files: {missing}")
    else:
        paths = [path]
    return _load_cifar_files(paths, label_bytes=1, num_classes=10, split=split)


def load_cifar100(path: str, split: str = "train") -> Dataset:
    """CIFAR-100 variant: 2 label bytes per record, fine label used."""
    if os.path.isdir(path):
        name = "train.bin" if split == "train" else "test.bin"
        paths = [os.path.join(path, name)]
    else:
        paths = [path]
    return _load_cifar_files(paths, label_bytes=2, num_classes=100, split=split)


@dataclass(frozen=True)
class SynthSpec:
    """Shape and difficulty of the synthetic blob dataset.

    ``margin`` is the class separation in units of the per-pixel noise
    level; large margins make a linear probe on raw pixels perfect.
    """

    samples: int = 512
    classes: int = 4
    channels: int = 3
    height: int = 8
    width: int = 8
    blobs_per_class: int = 3
    margin: float = 8.0
    noise: float = 0.02
    split: str = "train"

    def __post_init__(self):
        if self.samples < 1 or self.classes < 2:
            raise ValueError("need at least 1 sample and 2 classes")
        if self.noise < 0 or self.margin < 0:
            raise ValueError("noise and margin must be non-negative")


def _class_patterns(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm, zero-mean blob pattern per class, shape (classes, C, H, W)."""
    yy, xx = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    patterns = np.zeros((spec.classes, spec.channels, spec.height, spec.width))
    for c in range(spec.classes):
        img = np.zeros((spec.channels, spec.height, spec.width))
        for _ in range(spec.blobs_per_class):
            cy = rng.uniform(0, spec.height - 1)
            cx = rng.uniform(0, spec.width - 1)
            width = rng.uniform(0.15, 0.35) * min(spec.height, spec.width)
            color = rng.normal(size=spec.channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
            img += color[:, None, None] * bump[None]
        img -= img.mean()
        norm = np.linalg.norm(img)
        patterns[c] = img / norm if norm > 0 else img
    return patterns


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0) -> Dataset:
    """Deterministic class-conditional blob images with a planted separator.

    Class means sit ``margin * noise`` apart along (near-)orthogonal blob
    patterns around a 0.5 gray level; samples add i.i.d. pixel noise and are
    clipped to [0, 1].  Labels are assigned round-robin, so class counts are
    exactly balanced up to remainder, then shuffled.
    """
    rng = np.random.default_rng(seed)
    patterns = _class_patterns(spec, rng)
    labels = np.arange(spec.samples, dtype=np.int64) % spec.classes
    rng.shuffle(labels)
    amplitude = spec.margin * spec.noise
    images = 0.5 + amplitude * patterns[labels]
    if spec.noise > 0:
        images = images + spec.noise * rng.normal(size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images.astype(np.float32), labels, spec.classes, split=spec.split)
