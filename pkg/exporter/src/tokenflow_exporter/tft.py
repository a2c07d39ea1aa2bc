"""Standalone writer/reader for the engine's TFT1 tensor format.

Layout (little-endian, no padding): magic "TFT1", u32 dtype code (1 = f32),
u32 ndim, u64[ndim] dims, then the raw float32 payload in row-major order.
Implemented here so the exporter couples to the engine only through the
on-disk contract.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TFT1"
DTYPE_F32 = 1


def save_tensor(t: np.ndarray, path) -> None:
    t = np.ascontiguousarray(np.asarray(t), dtype=np.float32)
    if t.size and not np.isfinite(t).all():
        raise ValueError("refusing to export non-finite tensor")
    header = MAGIC + struct.pack("<II", DTYPE_F32, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(t.tobytes())
    os.replace(tmp, path)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad TFT1 magic")
    dtype_code, ndim = struct.unpack_from("<II", blob, 4)
    if dtype_code != DTYPE_F32:
        raise ValueError(f"{path}: unknown dtype code {dtype_code}")
    dims = struct.unpack_from(f"<{ndim}Q", blob, 12)
    count = int(np.prod(dims)) if dims else 1
    flat = np.frombuffer(blob, dtype="<f4", offset=12 + 8 * ndim, count=count)
    return np.ascontiguousarray(flat.reshape(dims))
