"""Inter-frame nearest-neighbor fields over attention tokens.

For every position in a source grid, find the cosine-nearest token in a
keyframe grid. ``nn_field_bruteforce`` is the reference double loop;
``nn_field_blocked`` normalizes rows once and scans similarity tiles with a
running argmax, producing identical indices (ties break to the lowest flat
index in both).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import TokenGrid
from .tensors import ShapeError, as_f32, load_tensor, save_tensor

NORM_FLOOR = 1e-12
DEFAULT_BLOCK = 64


@dataclass
class NNField:
    """Per-position correspondences from one frame into one keyframe.

    ``indices[p]`` is the flat position in the keyframe grid minimizing
    cosine distance to source position ``p``; ``distances[p]`` is that
    minimum. Ties resolve to the lowest index.
    """

    frame: int
    target_keyframe: int
    h: int
    w: int
    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        n = self.h * self.w
        if self.indices.shape != (n,) or self.distances.shape != (n,):
            raise ShapeError(
                f"NNField arrays must have shape ({n},), got "
                f"{self.indices.shape} and {self.distances.shape}"
            )
        if self.indices.size and self.indices.min() < 0:
            raise ValueError("correspondence indices must be nonnegative")
        if self.distances.size:
            lo, hi = self.distances.min(), self.distances.max()
            if lo < -1e-9 or hi > 2.0 + 1e-9:
                raise ValueError(f"cosine distances outside [0, 2]: [{lo}, {hi}]")
            # rounding spill only; argmin decisions already happened upstream
            self.distances = np.clip(self.distances, 0.0, 2.0)


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v); vectors with norm below 1e-12 are distance 1 to everything."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosine_distance length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        return 1.0
    return float(1.0 - np.dot(u, v) / (nu * nv))


def _check_dims(src: TokenGrid, key: TokenGrid):
    if src.dim != key.dim:
        raise ShapeError(f"token dims disagree: {src.dim} vs {key.dim}")


def nn_field_bruteforce(src: TokenGrid, key: TokenGrid) -> NNField:
    """Exact argmin by exhaustive scan; the oracle for the blocked kernel."""
    _check_dims(src, key)
    n_src = src.tokens.shape[0]
    n_key = key.tokens.shape[0]
    indices = np.zeros(n_src, dtype=np.int64)
    distances = np.zeros(n_src, dtype=np.float64)
    for p in range(n_src):
        best = np.inf
        best_q = 0
        for q in range(n_key):
            d = cosine_distance(src.tokens[p], key.tokens[q])
            if d < best:
                best = d
                best_q = q
        indices[p] = best_q
        distances[p] = best
    return NNField(src.frame, key.frame, src.h, src.w, indices, distances)


def _unit_rows(tokens: np.ndarray) -> np.ndarray:
    x = tokens.astype(np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    out = np.zeros_like(x)
    np.divide(x, norms, out=out, where=norms >= NORM_FLOOR)
    return out


def nn_field_blocked(src: TokenGrid, key: TokenGrid, block: int = DEFAULT_BLOCK) -> NNField:
    """Argmin via normalized dot-product tiles with a running per-row max.

    Zero rows on either side have similarity 0 everywhere, i.e. distance 1,
    matching ``cosine_distance``. The tile size never affects the result:
    updates use strict improvement, so earlier (lower) indices win ties.
    """
    _check_dims(src, key)
    src_hat = _unit_rows(src.tokens)
    key_hat = _unit_rows(key.tokens)
    n_src = src_hat.shape[0]
    n_key = key_hat.shape[0]
    best = np.full(n_src, -np.inf)
    arg = np.zeros(n_src, dtype=np.int64)
    for q0 in range(0, n_key, block):
        tile = key_hat[q0 : q0 + block]
        for p0 in range(0, n_src, block):
            sims = src_hat[p0 : p0 + block] @ tile.T
            tile_best = sims.max(axis=1)
            tile_arg = sims.argmax(axis=1)  # first max: lowest q within tile
            rows = slice(p0, p0 + tile_best.shape[0])
            better = tile_best > best[rows]
            best[rows] = np.where(better, tile_best, best[rows])
            arg[rows] = np.where(better, tile_arg + q0, arg[rows])
    return NNField(src.frame, key.frame, src.h, src.w, arg, 1.0 - best)


def adjacent_keyframes(
    i: int, keyframes: Sequence[int]
) -> tuple[Optional[int], Optional[int]]:
    """Closest past and future keyframes of frame ``i``.

    Returns ``(i_minus, i_plus)`` where a missing side is None. A keyframe
    equal to ``i`` fills both slots.
    """
    if len(keyframes) == 0:
        raise ValueError("keyframes must be nonempty")
    kf = list(keyframes)
    pos = bisect.bisect_right(kf, i)
    i_minus = kf[pos - 1] if pos > 0 else None
    pos_left = bisect.bisect_left(kf, i)
    i_plus = kf[pos_left] if pos_left < len(kf) else None
    return i_minus, i_plus


def save_nn_field(field: NNField, basepath: str) -> dict:
    """Write a field as a TFT1 pair; indices are f32-encoded exact integers."""
    if field.indices.size and field.indices.max() >= 2**24:
        raise ValueError("indices too large for exact f32 encoding")
    save_tensor(as_f32(field.indices), f"{basepath}.idx.tft")
    save_tensor(as_f32(field.distances), f"{basepath}.dst.tft")
    return {
        "frame": field.frame,
        "target_keyframe": field.target_keyframe,
        "h": field.h,
        "w": field.w,
        "indices": f"{basepath}.idx.tft",
        "distances": f"{basepath}.dst.tft",
    }


def load_nn_field(entry: dict) -> NNField:
    idx = load_tensor(entry["indices"])
    dst = load_tensor(entry["distances"])
    return NNField(
        entry["frame"],
        entry["target_keyframe"],
        entry["h"],
        entry["w"],
        np.round(idx).astype(np.int64),
        dst.astype(np.float64),
    )
