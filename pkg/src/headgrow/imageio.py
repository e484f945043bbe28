"""8-bit image and floating-point image-file I/O.

Floating-point images (ground-truth normals, depths, debug dumps) use a small
raw format, extension ``.hgf``::

    HGF1 <width> <height> <channels>\\n
    <width*height*channels little-endian float32, row-major, channels last>

Invalid pixels are stored as NaN.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

_MAGIC = b"HGF1"


def read_gray(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG/PGM as float64 in [0, 255]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def write_gray(path, values: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(values, float)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def read_mask(path) -> np.ndarray:
    return read_gray(path) >= 128


def write_mask(path, mask: np.ndarray) -> None:
    write_gray(path, np.where(np.asarray(mask, bool), 255, 0))


def write_float_image(path, values: np.ndarray) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC + f" {w} {h} {c}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_float_image(path) -> np.ndarray:
    """Return ``(H, W)`` for single-channel files, ``(H, W, C)`` otherwise."""
    raw = Path(path).read_bytes()
    end = raw.index(b"\n")
    head = raw[:end].split()
    if head[0] != _MAGIC:
        raise ValueError(f"{path}: not an HGF1 float image")
    w, h, c = (int(t) for t in head[1:4])
    arr = np.frombuffer(raw[end + 1 :], dtype="<f4", count=w * h * c).astype(np.float64)
    arr = arr.reshape(h, w, c)
    return arr[:, :, 0] if c == 1 else arr
