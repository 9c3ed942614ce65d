"""Raw saliency grid container (magic "SALG").

Layout: magic bytes "SALG", format version as u16 LE, then H and W as
u64 LE, then H*W float32 LE entries, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SALG"
FORMAT_VERSION = 1


class SaliencyFormatError(ValueError):
    pass


def save_grid(path: str | Path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 2:
        raise SaliencyFormatError(f"grid must be 2-d, got shape {grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<QQ", h, w))
        f.write(grid.astype("<f4").tobytes(order="C"))


def load_grid(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    header = 4 + 2 + 16
    if len(raw) < header or raw[:4] != MAGIC:
        raise SaliencyFormatError("not a SALG file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise SaliencyFormatError(f"unsupported SALG version {version}")
    h, w = struct.unpack_from("<QQ", raw, 6)
    expected = header + 4 * h * w
    if len(raw) != expected:
        raise SaliencyFormatError(
            f"truncated SALG file: {len(raw)} bytes, expected {expected}"
        )
    grid = np.frombuffer(raw, dtype="<f4", offset=header).reshape(h, w)
    return grid.copy()
