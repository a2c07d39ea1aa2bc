import math

import numpy as np
import pytest

from tokenflow import (
    BlendWeights,
    NNField,
    Rng,
    TBase,
    TokenGrid,
    blend_weight,
    nn_field_blocked,
    tokenflow_propagate,
)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_blend_weight_midpoint():
    assert blend_weight(4, 0, 8) == pytest.approx(sigmoid(0.5), abs=1e-12)
    assert sigmoid(0.5) == pytest.approx(0.622459, abs=1e-6)


def test_blend_weight_on_past_keyframe_side():
    # d_minus = 0 while a distinct future neighbor exists
    assert blend_weight(0, 0, 8) == pytest.approx(0.5, abs=1e-12)


def test_blend_weight_on_future_keyframe_side():
    assert blend_weight(8, 0, 8) == pytest.approx(sigmoid(1.0), abs=1e-12)
    assert sigmoid(1.0) == pytest.approx(0.731059, abs=1e-6)


def test_blend_weight_formula_grid():
    for d_minus in range(1, 33):
        for d_plus in range(1, 33):
            w = blend_weight(d_minus, 0, d_minus + d_plus)
            expected = sigmoid(d_minus / (d_minus + d_plus))
            assert abs(w - expected) <= 1e-9
            assert 0.5 <= w <= sigmoid(1.0) + 1e-12


def test_blend_weight_single_neighbor():
    assert blend_weight(3, None, 7) == 1.0
    assert blend_weight(9, 7, None) == 0.0


def test_blend_weight_self_keyframe_full_weight():
    assert blend_weight(5, 5, 5) == 1.0


def test_blend_weight_no_neighbors_rejected():
    with pytest.raises(ValueError):
        blend_weight(1, None, None)


def test_blend_weights_for_frame():
    bw = BlendWeights.for_frame(5, [0, 8])
    assert (bw.i_minus, bw.i_plus) == (0, 8)
    assert bw.weight_plus == pytest.approx(sigmoid(5 / 8), abs=1e-12)


def identity_field(frame, target, h, w):
    n = h * w
    return NNField(frame, target, h, w, np.arange(n), np.zeros(n))


def make_tbase(grids_tokens, keyframes, h, w, layer=0, t=1):
    grids = [
        TokenGrid(k, layer, t, h, w, tok) for k, tok in zip(keyframes, grids_tokens)
    ]
    return TBase(layer, t, list(keyframes), grids)


def test_constant_tokens_blend_to_constant():
    h, w, d = 2, 3, 4
    c = np.full((h * w, d), 2.5, np.float32)
    tbase = make_tbase([c, c], [0, 8], h, w)
    rng = Rng(1)
    gamma_p = NNField(3, 8, h, w, np.array([rng.randint(h * w) for _ in range(h * w)]), np.zeros(h * w))
    gamma_m = NNField(3, 0, h, w, np.array([rng.randint(h * w) for _ in range(h * w)]), np.zeros(h * w))
    out = tokenflow_propagate(tbase, gamma_p, gamma_m, BlendWeights.for_frame(3, [0, 8]), 3)
    assert np.allclose(out.tokens, 2.5, atol=1e-7)


def test_linearity_half_weight():
    h, w, d = 2, 2, 3
    u = Rng(2).normal_tensor((h * w, d))
    tbase = make_tbase([np.zeros_like(u), 2.0 * u], [0, 2], h, w)
    weights = BlendWeights(1, 0, 2, 0.5)
    out = tokenflow_propagate(
        tbase, identity_field(1, 2, h, w), identity_field(1, 0, h, w), weights, 1
    )
    assert np.allclose(out.tokens, u, atol=1e-7)


def per_position_oracle(tb_plus, tb_minus, gp, gm, i, i_minus, i_plus):
    """Scalar evaluation of the blend at every position."""
    d_minus, d_plus = i - i_minus, i_plus - i
    w = 1.0 / (1.0 + math.exp(-(d_minus / (d_plus + d_minus))))
    out = np.zeros_like(tb_plus)
    for p in range(out.shape[0]):
        for a in range(out.shape[1]):
            out[p, a] = w * float(tb_plus[gp[p], a]) + (1 - w) * float(tb_minus[gm[p], a])
    return out, w


def test_propagate_matches_per_position_oracle():
    rng = Rng(33)
    h, w, d = 3, 4, 5
    n = h * w
    for _ in range(20):
        kf = [2, 9]
        toks = [rng.normal_tensor((n, d)) for _ in kf]
        tbase = make_tbase(toks, kf, h, w)
        i = 5
        gp = np.array([rng.randint(n) for _ in range(n)])
        gm = np.array([rng.randint(n) for _ in range(n)])
        gamma_p = NNField(i, 9, h, w, gp, np.zeros(n))
        gamma_m = NNField(i, 2, h, w, gm, np.zeros(n))
        out = tokenflow_propagate(tbase, gamma_p, gamma_m, BlendWeights.for_frame(i, kf), i)
        expected, _ = per_position_oracle(toks[1], toks[0], gp, gm, i, 2, 9)
        assert np.allclose(out.tokens, expected, atol=1e-6)


def test_propagate_boundary_single_neighbor():
    rng = Rng(44)
    h, w, d = 2, 2, 3
    n = h * w
    toks = [rng.normal_tensor((n, d))]
    tbase = make_tbase(toks, [5], h, w)
    gp = np.array([rng.randint(n) for _ in range(n)])
    gamma_p = NNField(1, 5, h, w, gp, np.zeros(n))
    out = tokenflow_propagate(tbase, gamma_p, None, BlendWeights.for_frame(1, [5]), 1)
    assert np.array_equal(out.tokens, toks[0][gp])

    gamma_m = NNField(9, 5, h, w, gp, np.zeros(n))
    out = tokenflow_propagate(tbase, None, gamma_m, BlendWeights.for_frame(9, [5]), 9)
    assert np.array_equal(out.tokens, toks[0][gp])


def test_propagate_keyframe_self_consistency():
    rng = Rng(55)
    h, w, d = 2, 3, 4
    tbase = make_tbase([rng.normal_tensor((h * w, d))], [4], h, w)
    field = identity_field(4, 4, h, w)
    out = tokenflow_propagate(tbase, field, field, BlendWeights.for_frame(4, [4]), 4)
    assert np.array_equal(out.tokens, tbase.grids[0].tokens)


def test_propagate_convexity():
    rng = Rng(66)
    h, w, d = 2, 2, 4
    n = h * w
    toks = [rng.normal_tensor((n, d)) for _ in range(2)]
    tbase = make_tbase(toks, [0, 4], h, w)
    gp = np.array([rng.randint(n) for _ in range(n)])
    gm = np.array([rng.randint(n) for _ in range(n)])
    out = tokenflow_propagate(
        tbase,
        NNField(1, 4, h, w, gp, np.zeros(n)),
        NNField(1, 0, h, w, gm, np.zeros(n)),
        BlendWeights.for_frame(1, [0, 4]),
        1,
    )
    lo = np.minimum(toks[1][gp], toks[0][gm]) - 1e-6
    hi = np.maximum(toks[1][gp], toks[0][gm]) + 1e-6
    assert np.all(out.tokens >= lo) and np.all(out.tokens <= hi)


def test_propagate_scaling_linearity():
    rng = Rng(77)
    h, w, d = 2, 2, 3
    n = h * w
    toks = [rng.normal_tensor((n, d)) for _ in range(2)]
    gp = np.array([rng.randint(n) for _ in range(n)])
    gm = np.array([rng.randint(n) for _ in range(n)])
    weights = BlendWeights.for_frame(1, [0, 4])
    fields = (NNField(1, 4, h, w, gp, np.zeros(n)), NNField(1, 0, h, w, gm, np.zeros(n)))
    out1 = tokenflow_propagate(make_tbase(toks, [0, 4], h, w), *fields, weights, 1)
    scaled = tokenflow_propagate(
        make_tbase([3.0 * t for t in toks], [0, 4], h, w), *fields, weights, 1
    )
    assert np.allclose(scaled.tokens, 3.0 * out1.tokens, atol=1e-5)


def test_propagate_frame_count_invariance():
    rng = Rng(88)
    h, w, d = 2, 2, 3
    n = h * w
    toks = [rng.normal_tensor((n, d)) for _ in range(2)]
    tbase = make_tbase(toks, [0, 8], h, w)
    gp = np.array([rng.randint(n) for _ in range(n)])
    gm = np.array([rng.randint(n) for _ in range(n)])

    def out_for(frame):
        return tokenflow_propagate(
            tbase,
            NNField(frame, 8, h, w, gp, np.zeros(n)),
            NNField(frame, 0, h, w, gm, np.zeros(n)),
            BlendWeights.for_frame(frame, [0, 8]),
            frame,
        ).tokens

    first = out_for(2)
    _ = out_for(3)  # evaluating another frame cannot disturb frame 2
    assert np.array_equal(out_for(2), first)


def test_propagate_missing_required_field_rejected():
    rng = Rng(99)
    h, w, d = 2, 2, 3
    tbase = make_tbase([rng.normal_tensor((h * w, d)) for _ in range(2)], [0, 4], h, w)
    weights = BlendWeights.for_frame(1, [0, 4])
    with pytest.raises(ValueError):
        tokenflow_propagate(tbase, None, identity_field(1, 0, h, w), weights, 1)
    with pytest.raises(ValueError):
        tokenflow_propagate(tbase, identity_field(1, 4, h, w), None, weights, 1)


def test_tbase_validation():
    g = TokenGrid(0, 0, 1, 1, 2, np.zeros((2, 3), np.float32))
    with pytest.raises(ValueError):
        TBase(0, 1, [4, 0], [g, g])
    with pytest.raises(ValueError):
        TBase(0, 1, [0, 0], [g, g])
