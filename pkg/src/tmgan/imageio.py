"""TXIM single-image container.

Layout (little-endian): ``b"TXIM"``, u32 version, u32 H, u32 W, f32 dy_mm,
f32 dx_mm, u32 dtype tag (1 = f32, 2 = f64), then H*W row-major pixels in
offset-HU.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TXIM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIffI")
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


class ImageFormatError(ValueError):
    pass


def encode_image(pixels: np.ndarray, pixel_spacing_mm=(0.78125, 0.78125), dtype="f8") -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"TXIM stores 2-D images, got shape {arr.shape}")
    dt = np.dtype(dtype).newbyteorder("<")
    dy, dx = pixel_spacing_mm
    header = _HEADER.pack(MAGIC, VERSION, arr.shape[0], arr.shape[1], dy, dx, _TAGS[dt])
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_image(data: bytes, name: str = "<bytes>"):
    """Return (pixels, (dy, dx)); pixels come back in their stored precision."""
    if len(data) < _HEADER.size:
        raise ImageFormatError(f"{name}: truncated header")
    magic, version, h, w, dy, dx, tag = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ImageFormatError(f"{name}: not a TXIM image")
    if version != VERSION:
        raise ImageFormatError(f"{name}: unsupported TXIM version {version}")
    if tag not in _DTYPES:
        raise ImageFormatError(f"{name}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    expected = _HEADER.size + h * w * dt.itemsize
    if len(data) != expected:
        raise ImageFormatError(f"{name}: payload is {len(data) - _HEADER.size} bytes, header declares "
                               f"{expected - _HEADER.size}")
    pixels = np.frombuffer(data, dtype=dt, offset=_HEADER.size).reshape(h, w).astype(dt.newbyteorder("="))
    return pixels, (float(dy), float(dx))


def write_image(path, pixels: np.ndarray, pixel_spacing_mm=(0.78125, 0.78125), dtype="f8") -> None:
    Path(path).write_bytes(encode_image(pixels, pixel_spacing_mm, dtype))


def read_image(path):
    return decode_image(Path(path).read_bytes(), str(path))


def read_stack(paths) -> np.ndarray:
    return np.stack([read_image(p)[0] for p in paths])
