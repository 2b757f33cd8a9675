"""8-bit image files <-> float (C, H, W) arrays in [0, 1].

PNG goes through Pillow. Binary PPM (P6) is handled here directly so that a
dependency-free path exists for both reading and writing.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGE_SUFFIXES = (".png", ".ppm")


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C, H, W) float in [0, 1] -> (H, W, C) uint8 with round-half-to-even."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise FormatError(f"expected a (C, H, W) image with C in (1, 3), got {arr.shape}")
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.shape[0] == 1:
        q = np.repeat(q, 3, axis=0)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


def from_uint8(q: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(q.transpose(2, 0, 1), dtype=np.float64) / 255.0


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens = []
    pos = 0
    # Header: magic, width, height, maxval, separated by whitespace and comments.
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: only 8-bit PPM with positive size is supported")
    pos += 1  # single whitespace byte before the raster
    raster = data[pos:pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {w * h * 3}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)


def _ppm_bytes(q: np.ndarray) -> bytes:
    h, w, _ = q.shape
    return f"P6\n{w} {h}\n255\n".encode() + q.tobytes()


def read_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        return from_uint8(_read_ppm(path))
    if suffix != ".png":
        raise FormatError(f"{path}: unsupported image type (use .png or .ppm)")
    from PIL import Image

    try:
        with Image.open(path) as im:
            q = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot decode PNG ({exc})") from exc
    return from_uint8(q)


def write_image(path, img: np.ndarray) -> None:
    """Write atomically; the suffix selects PNG or PPM."""
    path = Path(path)
    q = to_uint8(img)
    suffix = path.suffix.lower()
    tmp = path.with_name(path.name + ".tmp")
    if suffix == ".ppm":
        tmp.write_bytes(_ppm_bytes(q))
    elif suffix == ".png":
        from PIL import Image

        # Fixed encoder settings keep the output bytes reproducible.
        Image.fromarray(q).save(tmp, format="PNG", optimize=False, compress_level=6)
    else:
        raise FormatError(f"{path}: unsupported image type (use .png or .ppm)")
    os.replace(tmp, path)


def list_images(directory) -> list:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
