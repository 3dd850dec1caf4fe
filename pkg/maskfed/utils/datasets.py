import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from maskfed.numerics import Matrix, RandomStream
from maskfed.utils.errors import ContractViolation, DataFormatError

logger = logging.getLogger(__name__)

CIFAR10_SIDE = 32
CIFAR10_CHANNELS = 3
CIFAR10_RECORD_BYTES = 1 + CIFAR10_SIDE * CIFAR10_SIDE * CIFAR10_CHANNELS
RECORDS_PER_BATCH = 10000
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]


@dataclass(frozen=True)
class LabeledImage:
    """An H x (W*C) image with pixels in [0, 1] and its class id."""

    image: Matrix
    label: int


def read_cifar10_batch(path: Path) -> list[LabeledImage]:
    """Read one CIFAR-10 binary batch file.

    Each record is one label byte followed by 3072 channel-planar pixel
    bytes (1024 R, 1024 G, 1024 B, each 32x32 row-major).
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR10_RECORD_BYTES:
        raise DataFormatError(
            f"{path}: {raw.size} bytes is not a whole number of "
            f"{CIFAR10_RECORD_BYTES}-byte records"
        )
    records = raw.reshape(-1, CIFAR10_RECORD_BYTES)
    pixels = (
        records[:, 1:]
        .reshape(-1, CIFAR10_CHANNELS, CIFAR10_SIDE, CIFAR10_SIDE)
        .transpose(0, 2, 3, 1)
        .reshape(-1, CIFAR10_SIDE, CIFAR10_SIDE * CIFAR10_CHANNELS)
    )
    images = pixels.astype(np.float64) / 255.0
    return [
        LabeledImage(image=img, label=int(label))
        for img, label in zip(images, records[:, 0])
    ]


def load_cifar10_binary(
    path: Path, which: Literal["train", "test"]
) -> list[LabeledImage]:
    """Load the train (50000) or test (10000) split from the directory
    holding the extracted ``cifar-10-batches-bin`` files."""
    files = CIFAR10_TRAIN_FILES if which == "train" else CIFAR10_TEST_FILES
    expected = RECORDS_PER_BATCH * CIFAR10_RECORD_BYTES
    dataset: list[LabeledImage] = []
    for name in files:
        file = Path(path) / name
        actual = file.stat().st_size
        if actual != expected:
            raise DataFormatError(
                f"{file}: expected {expected} bytes, found {actual}"
            )
        dataset.extend(read_cifar10_batch(file))
    logger.info(f"Loaded {len(dataset)} CIFAR-10 {which} images from {path}")
    return dataset


def to_cifar10_record(item: LabeledImage) -> bytes:
    """Serialize a 32x32x3 image back to its CIFAR-10 record."""
    expected = (CIFAR10_SIDE, CIFAR10_SIDE * CIFAR10_CHANNELS)
    if item.image.shape != expected:
        raise ContractViolation(
            f"CIFAR-10 images are {expected}, got {item.image.shape}"
        )
    planar = (
        np.rint(item.image * 255.0)
        .astype(np.uint8)
        .reshape(CIFAR10_SIDE, CIFAR10_SIDE, CIFAR10_CHANNELS)
        .transpose(2, 0, 1)
    )
    return bytes([item.label]) + planar.tobytes()


def _class_template(
    stream: RandomStream, h: int, w: int, c: int
) -> np.ndarray:
    """Smooth per-class pattern: a base color plus two low-frequency waves
    per channel, kept inside [0.15, 0.85]."""
    rows = np.linspace(0.0, 1.0, h)[:, None]
    cols = np.linspace(0.0, 1.0, w)[None, :]
    base = stream.uniform(0.3, 0.7, c)
    freqs = stream.uniform(0.5, 2.0, (c, 2))
    phases = stream.uniform(0.0, 2.0 * np.pi, (c, 2))
    template = np.empty((h, w, c))
    for ch in range(c):
        wave = np.sin(2 * np.pi * freqs[ch, 0] * rows + phases[ch, 0]) + (
            np.cos(2 * np.pi * freqs[ch, 1] * cols + phases[ch, 1])
        )
        template[:, :, ch] = base[ch] + 0.075 * wave
    return template


def synth_dataset(
    classes: int,
    per_class: int,
    h: int,
    w: int,
    c: int,
    seed: int,
    noise: float = 0.1,
) -> list[LabeledImage]:
    """Deterministic desk-scale dataset of smooth class templates plus
    uniform per-sample noise of the given amplitude, clipped to [0, 1]."""
    if classes < 2:
        raise ContractViolation(f"Need at least 2 classes, got {classes}")
    root = RandomStream(seed).derive("synth")
    templates = [
        _class_template(root.derive("template", k), h, w, c)
        for k in range(classes)
    ]
    dataset = []
    for k in range(classes):
        for i in range(per_class):
            jitter = root.derive("noise", k, i).uniform(
                -noise, noise, (h, w, c)
            )
            image = np.clip(templates[k] + jitter, 0.0, 1.0)
            dataset.append(LabeledImage(image.reshape(h, w * c), k))
    return dataset


def resize_bilinear(
    image: Matrix, new_h: int, new_w: int, channels: int
) -> Matrix:
    """Per-channel bilinear resize with corner-aligned sampling."""
    if new_h < 1 or new_w < 1:
        raise ContractViolation(
            f"Target size must be positive, got {new_h}x{new_w}"
        )
    h, wc = image.shape
    w = wc // channels
    if (new_h, new_w) == (h, w):
        return image.copy()
    rows = np.linspace(0.0, h - 1, new_h) if new_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1, new_w) if new_w > 1 else np.zeros(1)
    grid = np.meshgrid(rows, cols, np.arange(channels), indexing="ij")
    resized = map_coordinates(
        image.reshape(h, w, channels), grid, order=1, mode="nearest"
    )
    return resized.reshape(new_h, new_w * channels)


def resize_dataset(
    dataset: Sequence[LabeledImage], new_h: int, new_w: int, channels: int
) -> list[LabeledImage]:
    return [
        LabeledImage(
            resize_bilinear(item.image, new_h, new_w, channels), item.label
        )
        for item in dataset
    ]
