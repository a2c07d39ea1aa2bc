"""Dense float32 tensors, a reproducible RNG, and the TFT1 binary format.

Tensors are plain C-contiguous ``numpy.float32`` arrays. Reductions
(matmul, softmax) accumulate in float64 and round once on the way out,
which keeps results within tight tolerances of scalar oracles.

TFT1 on-disk layout (little-endian, no padding, no compression):

    offset 0   magic   b"TFT1"
    offset 4   u32     dtype code (1 = float32)
    offset 8   u32     ndim
    offset 12  u64[ndim] dims
    then       raw float32 payload, row-major
"""

from __future__ import annotations

import math
import os
import struct

import numpy as np

MAGIC = b"TFT1"
DTYPE_F32 = 1

_MASK64 = 0xFFFFFFFFFFFFFFFF
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TensorFormatError(ValueError):
    """Malformed TFT1 data; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def as_f32(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D float32 tensors, accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction, float64 accumulation."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {a.shape}")
    x = a.astype(np.float64)
    x -= x.max(axis=1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=1, keepdims=True)
    return x.astype(np.float32)


def save_tensor(t: np.ndarray, path) -> None:
    """Write a float32 tensor to ``path`` in TFT1 format."""
    t = np.asarray(t)
    if t.dtype != np.float32:
        raise TypeError(f"save_tensor requires float32 data, got {t.dtype}")
    if t.size and not np.isfinite(t).all():
        raise ValueError("save_tensor: tensor contains non-finite elements")
    t = np.ascontiguousarray(t)
    header = MAGIC + struct.pack("<II", DTYPE_F32, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(t.tobytes())
    os.replace(tmp, path)


def load_tensor(path) -> np.ndarray:
    """Read a TFT1 file back into a C-contiguous float32 array."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic in {path!r}", 0)
    if len(blob) < 12:
        raise TensorFormatError(f"truncated header in {path!r}", len(blob))
    dtype_code, ndim = struct.unpack_from("<II", blob, 4)
    if dtype_code != DTYPE_F32:
        raise TensorFormatError(f"unknown dtype code {dtype_code} in {path!r}", 4)
    dims_end = 12 + 8 * ndim
    if len(blob) < dims_end:
        raise TensorFormatError(f"truncated dims in {path!r}", len(blob))
    dims = struct.unpack_from(f"<{ndim}Q", blob, 12)
    count = 1
    for d in dims:
        count *= d
    end = dims_end + 4 * count
    if len(blob) < end:
        raise TensorFormatError(f"truncated payload in {path!r}", len(blob))
    if len(blob) > end:
        raise TensorFormatError(f"trailing bytes in {path!r}", end)
    flat = np.frombuffer(blob, dtype="<f4", offset=dims_end, count=count)
    return np.ascontiguousarray(flat.reshape(dims))


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class Rng:
    """splitmix64 stream generator.

    State update: ``s_{k+1} = (s_k + 0x9E3779B97F4A7C15) mod 2^64``; output is
    the xor-shift-multiply finalizer

        z = s;  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
                z = (z ^ (z >> 27)) * 0x94D049BB133111EB
                return z ^ (z >> 31)

    all mod 2^64. Because the state is an affine function of the draw index,
    bulk generation vectorizes; both paths emit the identical stream.
    Identical seeds give identical streams on every platform. Instances are
    single-owner: never share one across threads.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._n = 0  # number of u64 draws emitted so far

    def derive(self, *parts) -> "Rng":
        """Independent child stream keyed by FNV-1a of the label parts."""
        label = "/".join(str(p) for p in parts).encode("utf-8")
        return Rng(_mix64(self.seed ^ _fnv1a(label)))

    def next_u64(self) -> int:
        self._n += 1
        return _mix64(self.seed + self._n * _SPLITMIX_GAMMA)

    def _bulk_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._n + 1, self._n + n + 1, dtype=np.uint64)
        self._n += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_SPLITMIX_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            return z ^ (z >> np.uint64(31))

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1), float64."""
        return (self._bulk_u64(int(n)) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via 64-bit modulo (bias < n / 2^64)."""
        if n <= 0:
            raise ValueError("randint requires n >= 1")
        return self.next_u64() % n

    def normals(self, n: int) -> np.ndarray:
        """n standard normals, float64, via Box-Muller (2 draws per sample).

        z_k = sqrt(-2 ln u1_k) * cos(2 pi u2_k), u1 in (0, 1], u2 in [0, 1).
        """
        n = int(n)
        raw = self._bulk_u64(2 * n)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def uniform_tensor(self, shape, low=0.0, high=1.0) -> np.ndarray:
        size = int(np.prod(shape)) if shape else 1
        u = self.uniforms(size) * (high - low) + low
        return as_f32(u.reshape(shape))

    def normal_tensor(self, shape, scale=1.0) -> np.ndarray:
        size = int(np.prod(shape)) if shape else 1
        return as_f32(self.normals(size).reshape(shape) * scale)
