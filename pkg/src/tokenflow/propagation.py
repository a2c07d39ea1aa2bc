"""Propagation of edited keyframe tokens to every frame.

Each output token is a convex combination of the two adjacent keyframes'
edited tokens, gathered through the original video's correspondence fields:

    out[p] = w * base_plus[gamma_plus[p]] + (1 - w) * base_minus[gamma_minus[p]]

with w = sigmoid(d_minus / (d_plus + d_minus)) from the frame distances to
its neighbors. Frames outside the keyframe range use the single existing
neighbor with full weight; a frame that is itself a keyframe takes its own
tokens with full weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import TokenGrid
from .correspondence import NNField, adjacent_keyframes
from .tensors import ShapeError, as_f32

SIGMOID_HALF = 0.5  # sigma(0)
SIGMOID_ONE = 1.0 / (1.0 + math.exp(-1.0))  # sigma(1) ~ 0.7310586


@dataclass
class TBase:
    """Edited keyframe token grids for one (layer, timestep)."""

    layer: int
    timestep: int
    keyframes: list[int]
    grids: list[TokenGrid]

    def __post_init__(self):
        if sorted(set(self.keyframes)) != list(self.keyframes):
            raise ValueError(f"keyframes must be sorted and unique: {self.keyframes}")
        if len(self.grids) != len(self.keyframes):
            raise ShapeError("one grid per keyframe required")
        shapes = {(g.h, g.w, g.dim) for g in self.grids}
        if len(shapes) > 1:
            raise ShapeError(f"keyframe grids disagree in shape: {shapes}")

    def grid_for(self, keyframe: int) -> TokenGrid:
        return self.grids[self.keyframes.index(keyframe)]


def blend_weight(i: int, i_minus: Optional[int], i_plus: Optional[int]) -> float:
    """Weight of the future keyframe in the two-sided blend.

    sigma(d_minus / (d_plus + d_minus)) when both neighbors exist and differ
    from ``i``; 1.0 when ``i`` is itself the (unique) adjacent keyframe; 1.0
    or 0.0 when only the future or only the past neighbor exists.
    """
    if i_minus is None and i_plus is None:
        raise ValueError("frame has no adjacent keyframe on either side")
    if i_minus is None:
        return 1.0
    if i_plus is None:
        return 0.0
    if not (i_minus <= i <= i_plus):
        raise ValueError(f"expected i_minus <= i <= i_plus, got {i_minus}, {i}, {i_plus}")
    if i_minus == i_plus == i:
        return 1.0
    d_minus = float(i - i_minus)
    d_plus = float(i_plus - i)
    ratio = d_minus / (d_plus + d_minus)
    return 1.0 / (1.0 + math.exp(-ratio))


@dataclass
class BlendWeights:
    """Resolved neighbors and future-keyframe weight for one frame."""

    frame: int
    i_minus: Optional[int]
    i_plus: Optional[int]
    weight_plus: float

    @classmethod
    def for_frame(cls, i: int, keyframes: Sequence[int]) -> "BlendWeights":
        i_minus, i_plus = adjacent_keyframes(i, keyframes)
        return cls(i, i_minus, i_plus, blend_weight(i, i_minus, i_plus))


def _gather(grid: TokenGrid, field: NNField) -> np.ndarray:
    idx = field.indices
    if idx.size and (idx.min() < 0 or idx.max() >= grid.tokens.shape[0]):
        raise ShapeError("correspondence indices outside keyframe grid")
    return grid.tokens[idx].astype(np.float64)


def tokenflow_propagate(
    tbase: TBase,
    gamma_plus: Optional[NNField],
    gamma_minus: Optional[NNField],
    weights: BlendWeights,
    frame: int,
) -> TokenGrid:
    """Blend gathered keyframe tokens into a full token grid for ``frame``.

    Applied to every frame, keyframes included. The field of a neighbor with
    zero weight may be omitted.
    """
    if weights.frame != frame:
        raise ValueError(f"weights are for frame {weights.frame}, not {frame}")
    w = float(weights.weight_plus)
    parts = []
    ref = None
    if w > 0.0:
        if gamma_plus is None or weights.i_plus is None:
            raise ValueError(f"frame {frame}: future keyframe field required (w={w})")
        if gamma_plus.target_keyframe != weights.i_plus:
            raise ValueError(
                f"gamma_plus targets keyframe {gamma_plus.target_keyframe}, "
                f"expected {weights.i_plus}"
            )
        ref = gamma_plus
        parts.append(w * _gather(tbase.grid_for(weights.i_plus), gamma_plus))
    if w < 1.0:
        if gamma_minus is None or weights.i_minus is None:
            raise ValueError(f"frame {frame}: past keyframe field required (w={w})")
        if gamma_minus.target_keyframe != weights.i_minus:
            raise ValueError(
                f"gamma_minus targets keyframe {gamma_minus.target_keyframe}, "
                f"expected {weights.i_minus}"
            )
        ref = ref or gamma_minus
        parts.append((1.0 - w) * _gather(tbase.grid_for(weights.i_minus), gamma_minus))
    out = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return TokenGrid(frame, tbase.layer, tbase.timestep, ref.h, ref.w, as_f32(out))
