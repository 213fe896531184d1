"""Bundled texture images, directory datasets and batch sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import ImageFormatError, ImageRecord, read_image, write_image

TEXTURE_KINDS = ("stripes", "checker", "blobs")


class DatasetError(ValueError):
    pass


def _color(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=3)


def texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) texture with hard edges and flat colors."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    a, b = _color(rng), _color(rng)
    if kind == "stripes":
        angle = rng.uniform(0.0, np.pi)
        period = rng.uniform(4.0, 10.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        mask = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase) > 0
    elif kind == "checker":
        cell = int(rng.integers(3, 9))
        ox, oy = rng.integers(0, cell, size=2)
        mask = ((xx + ox) // cell + (yy + oy) // cell) % 2 == 0
    elif kind == "blobs":
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cx, cy = rng.uniform(0, size, size=2)
            r = rng.uniform(size / 10, size / 4)
            mask |= (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    img = np.where(mask[None], a[:, None, None], b[:, None, None])
    return img


def textures(count: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``count`` textures cycling through the kinds; returns (images NCHW, kind labels)."""
    images = np.empty((count, 3, size, size))
    labels = np.arange(count) % len(TEXTURE_KINDS)
    for i, label in enumerate(labels):
        images[i] = texture(TEXTURE_KINDS[label], size, rng)
    return images, labels


def write_textures(directory, count: int, size: int, rng: np.random.Generator) -> list[Path]:
    images, labels = textures(count, size, rng)
    paths = []
    for i, (img, label) in enumerate(zip(images, labels)):
        path = Path(directory) / f"{i:05d}_{TEXTURE_KINDS[label]}.ppm"
        write_image(ImageRecord.from_chw(img), path)
        paths.append(path)
    return paths


def load_dataset(path, expected_size) -> list[ImageRecord]:
    """Every .ppm/.pgm file under ``path`` in sorted filename order.

    ``expected_size`` is an int (square) or (width, height); files of any
    other size are rejected rather than resampled.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    if isinstance(expected_size, int):
        expected_size = (expected_size, expected_size)
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not files:
        raise DatasetError(f"no .ppm or .pgm files in {root}")
    records = []
    for f in files:
        try:
            rec = read_image(f)
        except ImageFormatError as exc:
            raise DatasetError(str(exc)) from None
        if (rec.width, rec.height) != tuple(expected_size):
            raise DatasetError(f"{f}: size {rec.width}x{rec.height} != expected {expected_size[0]}x{expected_size[1]}")
        records.append(rec)
    if len({r.channels for r in records}) > 1:
        raise DatasetError(f"{root}: mixed grayscale and color images")
    return records


@dataclass
class ImageSet:
    """Train and test images as NCHW float arrays, with integer labels when known."""

    train: np.ndarray
    test: np.ndarray
    train_labels: np.ndarray | None = None

    @property
    def stored_size(self) -> int:
        return self.train.shape[-1]

    def sample_batch(self, rng: np.random.Generator, batch: int, crop: int) -> np.ndarray:
        """Random images, each cut to a random ``crop`` x ``crop`` patch."""
        idx = rng.choice(len(self.train), size=min(batch, len(self.train)), replace=False)
        slack = self.stored_size - crop
        offsets = rng.integers(0, slack + 1, size=(len(idx), 2))
        out = np.empty((len(idx), self.train.shape[1], crop, crop))
        for k, (i, (oy, ox)) in enumerate(zip(idx, offsets)):
            out[k] = self.train[i, :, oy : oy + crop, ox : ox + crop]
        return out

    def test_images(self, crop: int) -> np.ndarray:
        o = (self.stored_size - crop) // 2
        return self.test[:, :, o : o + crop, o : o + crop]


def builtin_textures(train_count: int, test_count: int, size: int, seed: int) -> ImageSet:
    from .rng import stream

    train, labels = textures(train_count, size, stream(seed, "dataset.train"))
    test, _ = textures(test_count, size, stream(seed, "dataset.test"))
    return ImageSet(train, test, labels)


def directory_images(path, size: int, test_count: int) -> ImageSet:
    records = load_dataset(path, size)
    if test_count < 2 or test_count >= len(records):
        raise DatasetError(f"{path}: need at least 2 test images and 1 training image, "
                           f"have {len(records)} with test_count={test_count}")
    arr = np.stack([r.chw() for r in records])
    return ImageSet(arr[:-test_count], arr[-test_count:])
