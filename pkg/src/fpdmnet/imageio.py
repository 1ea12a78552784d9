"""8-bit grayscale image files: binary PGM (P5) and PNG.

Pixel values map to [0, 1] by ``v / 255``; saving inverts with
``round(v * 255)`` clamped to [0, 255].
"""
from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

SUFFIXES = (".pgm", ".png")


class ImageFormatError(ValueError):
    """File header cannot be parsed."""


class UnsupportedFormatError(ImageFormatError):
    """Well-formed file that is not 8-bit grayscale."""


_PNM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def _read_pgm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic in (b"P6", b"P3", b"P1", b"P4", b"P7"):
        raise UnsupportedFormatError(f"{magic.decode()} netpbm files are not 8-bit grayscale")
    if magic == b"P2":
        raise UnsupportedFormatError("ASCII PGM (P2) is not supported; use binary P5")
    if magic != b"P5":
        raise ImageFormatError("missing P5 magic number")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PNM_TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError("truncated PGM header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise ImageFormatError(f"bad PGM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormatError(f"only 8-bit PGM (maxval 255) is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"bad PGM dimensions {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("PGM header must end with a single whitespace byte")
    pos += 1
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise ImageFormatError(f"PGM raster truncated: {len(raster)} of {width * height} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def _read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise UnsupportedFormatError(f"{path}: not a PNG file")
            if im.mode != "L":
                raise UnsupportedFormatError(f"{path}: PNG mode {im.mode} is not 8-bit grayscale")
            return np.array(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def read_u8(path) -> np.ndarray:
    """Read raw 8-bit pixels (H x W uint8)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return _read_png(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    return _read_pgm(data)


def load_image(path) -> np.ndarray:
    """Load a grayscale image as float64 values in [0, 1]."""
    return read_u8(path).astype(np.float64) / 255.0


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_u8(pixels: np.ndarray, path) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"expected a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if path.suffix.lower() == ".png":
        # fixed compression settings keep output byte-identical across runs
        Image.fromarray(pixels).save(tmp, format="PNG", optimize=False, compress_level=6)
    else:
        h, w = pixels.shape
        with open(tmp, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(pixels).tobytes())
    os.replace(tmp, path)


def save_image(image: np.ndarray, path) -> None:
    """Save a [0, 1] image as 8-bit grayscale; format follows the suffix."""
    write_u8(to_u8(image), path)


def list_images(directory) -> list:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in SUFFIXES and p.is_file())
