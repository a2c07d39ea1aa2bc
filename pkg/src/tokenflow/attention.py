"""Single-frame and extended multi-frame attention with token hook points.

Extended attention lets one frame's queries attend over the concatenated
keys/values of several frames, which is how sampled keyframes are edited
jointly. ``attention_block`` adds the projections, the hook points used for
token extraction/replacement, and the residual connection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensors import ShapeError, as_f32, matmul, softmax_rows


@dataclass
class TokenGrid:
    """Per-frame token map of one attention layer at one timestep.

    ``tokens`` has one row per spatial position, row-major over (h, w).
    """

    frame: int
    layer: int
    timestep: int
    h: int
    w: int
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = as_f32(self.tokens)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.h * self.w:
            raise ShapeError(
                f"TokenGrid expects ({self.h * self.w}, d) tokens, got {self.tokens.shape}"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class AttentionInputs:
    """Q/K/V projections for one or more frames sharing a head dim.

    ``frame_ids`` must be strictly increasing; the lists are aligned with it.
    """

    frame_ids: list[int]
    q: list[np.ndarray]
    k: list[np.ndarray]
    v: list[np.ndarray]
    head_dim: int

    def __post_init__(self):
        if not self.frame_ids:
            raise ValueError("frame_ids must be nonempty")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise ValueError(f"frame_ids must be strictly increasing: {self.frame_ids}")
        if not (len(self.q) == len(self.k) == len(self.v) == len(self.frame_ids)):
            raise ShapeError("q/k/v lists must align with frame_ids")
        for m in (*self.q, *self.k, *self.v):
            if m.ndim != 2 or m.shape[1] != self.head_dim:
                raise ShapeError(f"expected (*, {self.head_dim}) projections, got {m.shape}")


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(q kᵀ / sqrt(d)) v for already-projected, already-stacked K/V."""
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value row counts disagree: {k.shape} vs {v.shape}")
    d = q.shape[1]
    logits = matmul(as_f32(q / math.sqrt(d)), as_f32(k.T))
    return matmul(softmax_rows(logits), v)


def self_attention(inp: AttentionInputs) -> np.ndarray:
    """Attention of a single frame over its own keys and values."""
    if len(inp.frame_ids) != 1:
        raise ValueError(f"self_attention expects one frame, got {inp.frame_ids}")
    return attend(inp.q[0], inp.k[0], inp.v[0])


def extended_attention(inp: AttentionInputs, query_frame: int) -> np.ndarray:
    """One frame's queries over the concatenated K/V of all frames.

    Keys and values are concatenated in ascending frame order. The output is
    invariant to that order as long as K and V blocks are permuted together.
    """
    if query_frame not in inp.frame_ids:
        raise ValueError(f"query_frame {query_frame} not in {inp.frame_ids}")
    rows = inp.q[0].shape[0]
    for m in (*inp.q, *inp.k, *inp.v):
        if m.shape[0] != rows:
            raise ShapeError("extended attention requires equal token counts per frame")
    qi = inp.q[inp.frame_ids.index(query_frame)]
    return attend(qi, np.concatenate(inp.k, axis=0), np.concatenate(inp.v, axis=0))


@dataclass
class AttentionWeights:
    """Query/key/value/output projections of one attention layer."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            m = as_f32(getattr(self, name))
            setattr(self, name, m)
            if m.shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {m.shape}")


@dataclass
class BlockHooks:
    """Observation and replacement callbacks for one attention block.

    ``on_input`` sees the block's input tokens. ``on_output`` sees the
    post-projection tokens, before the residual add. ``replace`` may return
    a substitute for those post-projection tokens (same shape); the residual
    input is added afterwards. All callbacks get the grid metadata first.
    """

    on_input: Optional[Callable[[TokenGrid, np.ndarray], None]] = None
    on_output: Optional[Callable[[TokenGrid, np.ndarray], None]] = None
    replace: Optional[Callable[[TokenGrid, np.ndarray], Optional[np.ndarray]]] = None


def attention_block(
    x: TokenGrid,
    weights: AttentionWeights,
    hooks: Optional[BlockHooks] = None,
    context: Optional[Sequence[TokenGrid]] = None,
) -> TokenGrid:
    """Projected attention with hooks and a residual connection.

    ``context`` switches the block to extended attention: keys/values come
    from every grid in the (ascending-frame) context, which must include
    ``x`` itself. Token extraction and replacement happen after the output
    projection and before the residual add.
    """
    if hooks and hooks.on_input:
        hooks.on_input(x, x.tokens)
    d = x.dim
    if context is None:
        kv_sources = [x]
        frame_ids = [x.frame]
    else:
        kv_sources = sorted(context, key=lambda g: g.frame)
        frame_ids = [g.frame for g in kv_sources]
        if x.frame not in frame_ids:
            raise ValueError(f"context must contain the query frame {x.frame}")
    inp = AttentionInputs(
        frame_ids=frame_ids,
        q=[matmul(g.tokens, weights.wq) for g in kv_sources],
        k=[matmul(g.tokens, weights.wk) for g in kv_sources],
        v=[matmul(g.tokens, weights.wv) for g in kv_sources],
        head_dim=d,
    )
    att = extended_attention(inp, x.frame) if context is not None else self_attention(inp)
    out = matmul(att, weights.wo)
    if hooks and hooks.on_output:
        hooks.on_output(x, out)
    if hooks and hooks.replace:
        replacement = hooks.replace(x, out)
        if replacement is not None:
            replacement = as_f32(replacement)
            if replacement.shape != out.shape:
                raise ShapeError(
                    f"replacement hook returned {replacement.shape}, expected {out.shape}"
                )
            out = replacement
    return TokenGrid(x.frame, x.layer, x.timestep, x.h, x.w, x.tokens + out)
