"""Lossless tensor container (GTEN) and PNG helpers.

GTEN layout: magic b"GTEN", u32 rank, u32 per-axis dims, then little-endian
float32 payload in C order. Used wherever tests need exact float I/O; PNGs
are only for human inspection.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"GTEN"


def write_gten(path: str | Path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_gten(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (rank,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        data = np.frombuffer(f.read(), dtype="<f4")
    expected = int(np.prod(shape)) if rank else 1
    if data.size != expected:
        raise ValueError(f"{path}: payload has {data.size} floats, header says {expected}")
    return data.reshape(shape).astype(np.float32)


def write_png(path: str | Path, image) -> None:
    """Save an HxW or HxWx3 float image in [0,1] as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float32)
    arr = np.clip(arr, 0.0, 1.0)
    u8 = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(u8).save(path)


def read_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0
