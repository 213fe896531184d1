"""Binary PPM/PGM images, image grids and atomic file writes."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageRecord:
    """Pixels as an (H, W, C) float array in [0, 1]."""

    pixels: np.ndarray
    source: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def chw(self) -> np.ndarray:
        return self.pixels.transpose(2, 0, 1)

    @classmethod
    def from_chw(cls, array: np.ndarray, source: str = "") -> ImageRecord:
        return cls(np.clip(np.asarray(array, dtype=np.float64).transpose(1, 2, 0), 0.0, 1.0), source)


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ImageFormatError("truncated header")
        tokens.append(data[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def decode_pnm(data: bytes, name: str = "<bytes>") -> ImageRecord:
    try:
        (magic, w, h, maxval), offset = _header_tokens(data, 4)
        width, height, maxval = int(w), int(h), int(maxval)
    except (ImageFormatError, ValueError) as exc:
        raise ImageFormatError(f"{name}: bad header ({exc})") from None
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise ImageFormatError(f"{name}: unsupported magic {magic!r} (expected P5 or P6)")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{name}: only 8-bit maxval is supported, got {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{name}: empty image {width}x{height}")
    n = width * height * channels
    raster = data[offset : offset + n]
    if len(raster) != n:
        raise ImageFormatError(f"{name}: expected {n} pixel bytes, found {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels) / float(maxval)
    return ImageRecord(np.clip(pixels, 0.0, 1.0), name)


def read_image(path) -> ImageRecord:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"{path}: unreadable ({exc.strerror})") from None
    return decode_pnm(data, str(path))


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to bytes."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(pixels: np.ndarray) -> bytes:
    h, w, c = pixels.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    return magic + f"\n{w} {h}\n255\n".encode() + quantize(pixels).tobytes()


def write_image(record: ImageRecord, path) -> None:
    atomic_write(path, encode_pnm(record.pixels))


def grid_pixels(images: list[ImageRecord], cols: int, gutter: int = 2) -> np.ndarray:
    if not images:
        raise ValueError("write_grid needs at least one image")
    h, w = images[0].height, images[0].width
    if any(im.height != h or im.width != w for im in images):
        raise ValueError("write_grid needs images of one size")
    cols = max(1, min(cols, len(images)))
    rows = -(-len(images) // cols)
    canvas = np.zeros((rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter, 3))
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        px = im.pixels if im.channels == 3 else np.repeat(im.pixels, 3, axis=2)
        canvas[r * (h + gutter) : r * (h + gutter) + h, c * (w + gutter) : c * (w + gutter) + w] = px
    return canvas


def write_grid(images: list[ImageRecord], cols: int, path) -> None:
    """Tile images row-major into one P6 file with a black 2-pixel gutter."""
    canvas = grid_pixels(images, cols)
    try:
        atomic_write(path, encode_pnm(canvas))
    except OSError as exc:
        raise OSError(f"cannot write grid to {path}: {exc.strerror}") from exc
