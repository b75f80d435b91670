import math

import numpy as np
import pytest
from conftest import leaf

from datkit import ConfigError, DimensionError, ParameterError, Tensor
from datkit.attention import (
    BlockParams,
    LayerNormParams,
    Linear,
    MhsaParams,
    MlpParams,
    SraParams,
    WindowAttnParams,
    mhsa,
    relative_position_index,
    sra_attention,
    stochastic_depth,
    transformer_block,
    window_attention,
)
from datkit.gradcheck import grad_check

F64 = np.float64


def identity_mhsa(C, heads=1):
    lin = [Linear(leaf(np.eye(C)), None) for _ in range(4)]
    return MhsaParams(*lin, heads=heads)


def test_mhsa_single_token_is_value_path(rng):
    p = MhsaParams.init(rng, 6, 2, dtype=F64)
    x = rng.normal(size=(1, 6))
    out = mhsa(leaf(x), p).data
    ref = (x @ p.v.weight.data + p.v.bias.data) @ p.o.weight.data + p.o.bias.data
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_mhsa_identity_projections_hand_case():
    p = identity_mhsa(2)
    x = np.eye(2)
    out = mhsa(leaf(x), p).data
    a = math.exp(1 / math.sqrt(2))
    attn = np.array([[a, 1.0], [1.0, a]]) / (a + 1.0)
    np.testing.assert_allclose(out, attn @ x, atol=1e-15)


def test_mhsa_masking_limit(rng):
    p = MhsaParams.init(rng, 4, 2, dtype=F64)
    x = rng.normal(size=(3, 4))
    bias = np.where(np.eye(3, dtype=bool), 0.0, -1e9)
    out = mhsa(leaf(x), p, leaf(np.broadcast_to(bias, (2, 3, 3)).copy())).data
    ref = (x @ p.v.weight.data + p.v.bias.data) @ p.o.weight.data + p.o.bias.data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_mhsa_bias_shape_checked(rng):
    p = MhsaParams.init(rng, 4, 2, dtype=F64)
    with pytest.raises(DimensionError):
        mhsa(leaf(np.zeros((3, 4))), p, leaf(np.zeros((2, 3, 4))))


def test_mhsa_single_token_linear_in_x(rng):
    p = MhsaParams.init(rng, 4, 2, dtype=F64)
    for lin in (p.v, p.o):
        lin.bias.data[:] = 0
    x = rng.normal(size=(1, 4))
    np.testing.assert_allclose(mhsa(leaf(3.0 * x), p).data, 3.0 * mhsa(leaf(x), p).data, atol=1e-14)


def test_heads_must_divide_channels(rng):
    with pytest.raises(ConfigError):
        MhsaParams.init(rng, 6, 4)


# -- window attention --------------------------------------------------------------

def test_relative_index_w2():
    idx = relative_position_index(2)
    assert idx.shape == (4, 4)
    assert len(np.unique(idx)) == 9
    assert np.array_equal(idx.T, 8 - idx)


def test_relative_index_matches_displacement():
    w = 3
    idx = relative_position_index(w)
    for i in range(w * w):
        for j in range(w * w):
            dy, dx = i // w - j // w, i % w - j % w
            assert idx[i, j] == (dy + w - 1) * (2 * w - 1) + dx + w - 1


def test_window_covering_map_equals_mhsa(rng):
    p = WindowAttnParams.init(rng, 4, 2, window=3, dtype=F64)
    p.bias_table.data[:] = 0
    x = rng.normal(size=(3, 3, 4))
    out = window_attention(leaf(x), p).data
    ref = mhsa(leaf(x.reshape(9, 4)), p.attn).data.reshape(3, 3, 4)
    np.testing.assert_allclose(out, ref, atol=1e-13)


def _influence(fn, x, eps=1e-3):
    """Boolean [HW, HW]: does perturbing token j change output token i."""
    H, W, C = x.shape
    base = fn(x)
    infl = np.zeros((H * W, H * W), dtype=bool)
    for j in range(H * W):
        xp = x.copy()
        xp[j // W, j % W] += eps
        diff = np.abs(fn(xp) - base).reshape(H * W, C).max(-1)
        infl[:, j] = diff > 0
    return infl


def test_windows_are_independent(rng):
    p = WindowAttnParams.init(rng, 4, 2, window=2, dtype=F64)
    x = rng.normal(size=(4, 4, 4))
    infl = _influence(lambda a: window_attention(leaf(a), p).data, x)
    for i in range(16):
        for j in range(16):
            same = (i // 4) // 2 == (j // 4) // 2 and (i % 4) // 2 == (j % 4) // 2
            assert infl[i, j] == same


def test_shifted_windows_mask_wrapped_pairs(rng):
    H = W = 4
    w, s = 2, 1
    p = WindowAttnParams.init(rng, 4, 2, window=w, shift=s, dtype=F64)
    x = rng.normal(size=(H, W, 4))
    infl = _influence(lambda a: window_attention(leaf(a), p).data, x)
    for i in range(16):
        for j in range(16):
            ri, ci, rj, cj = i // W, i % W, j // W, j % W
            # positions after rolling the map up-left by s
            ai, bi, aj, bj = (ri - s) % H, (ci - s) % W, (rj - s) % H, (cj - s) % W
            same_window = ai // w == aj // w and bi // w == bj // w
            no_wrap = (ai - aj == ri - rj) and (bi - bj == ci - cj)
            assert infl[i, j] == (same_window and no_wrap), (i, j)


def test_window_permutation_equivariance(rng):
    p = WindowAttnParams.init(rng, 4, 2, window=2, dtype=F64)
    x = rng.normal(size=(4, 4, 4))
    xs = x.copy()
    xs[:2, :2], xs[2:, 2:] = x[2:, 2:], x[:2, :2]
    out = window_attention(leaf(x), p).data
    outs = window_attention(leaf(xs), p).data
    np.testing.assert_array_equal(outs[:2, :2], out[2:, 2:])
    np.testing.assert_array_equal(outs[2:, 2:], out[:2, :2])
    np.testing.assert_array_equal(outs[:2, 2:], out[:2, 2:])


def test_window_divisibility(rng):
    p = WindowAttnParams.init(rng, 4, 2, window=3, dtype=F64)
    with pytest.raises(ConfigError):
        window_attention(leaf(np.zeros((4, 4, 4))), p)


def test_bad_shift_rejected(rng):
    with pytest.raises(ConfigError):
        WindowAttnParams.init(rng, 4, 2, window=4, shift=1)


@pytest.mark.parametrize("shift", [0, 1])
def test_window_attention_gradcheck(rng, shift):
    p = WindowAttnParams.init(rng, 4, 2, window=2, shift=shift, dtype=F64)
    x = leaf(rng.normal(size=(4, 4, 4)))
    ins = [x, p.bias_table, p.attn.q.weight, p.attn.v.bias, p.attn.o.weight]
    assert grad_check(lambda x, *_: window_attention(x, p), ins) < 1e-5


# -- SRA --------------------------------------------------------------------------

def test_sra_reduction_one_is_mhsa(rng):
    p = SraParams.init(rng, 4, 2, reduction=1, dtype=F64)
    x = rng.normal(size=(4, 4, 4))
    out = sra_attention(leaf(x), p).data
    ref = mhsa(leaf(x.reshape(16, 4)), p.attn).data.reshape(4, 4, 4)
    np.testing.assert_allclose(out, ref, atol=1e-13)


def test_sra_single_key_rows_identical(rng):
    p = SraParams.init(rng, 4, 2, reduction=4, dtype=F64)
    out = sra_attention(leaf(rng.normal(size=(4, 4, 4))), p).data.reshape(16, 4)
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-14)


def test_sra_direct_construction(rng):
    C, M, R = 4, 2, 2
    p = SraParams.init(rng, C, M, reduction=R, dtype=F64)
    p.sr_bias.data[:] = rng.normal(size=C)
    x = rng.normal(size=(4, 4, C))
    out = sra_attention(leaf(x), p).data.reshape(16, C)

    wk = p.sr_weight.data  # Cout Cin R R
    red = np.zeros((2, 2, C))
    for i in range(2):
        for j in range(2):
            patch = x[2 * i:2 * i + 2, 2 * j:2 * j + 2]  # R R Cin
            red[i, j] = np.einsum("abc,ocab->o", patch, wk) + p.sr_bias.data
    red = red.reshape(4, C)
    red = (red - red.mean(-1, keepdims=True)) / np.sqrt(red.var(-1, keepdims=True) + 1e-5)
    a = p.attn
    q = x.reshape(16, C) @ a.q.weight.data + a.q.bias.data
    k = red @ a.k.weight.data + a.k.bias.data
    v = red @ a.v.weight.data + a.v.bias.data
    d = C // M
    z = np.zeros((16, C))
    for m in range(M):
        sl = slice(m * d, (m + 1) * d)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(d)
        e = np.exp(logits - logits.max(-1, keepdims=True))
        z[:, sl] = (e / e.sum(-1, keepdims=True)) @ v[:, sl]
    ref = z @ a.o.weight.data + a.o.bias.data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_sra_divisibility(rng):
    p = SraParams.init(rng, 4, 2, reduction=3, dtype=F64)
    with pytest.raises(ConfigError):
        sra_attention(leaf(np.zeros((4, 4, 4))), p)


def test_sra_gradcheck(rng):
    p = SraParams.init(rng, 4, 2, reduction=2, dtype=F64)
    x = leaf(rng.normal(size=(4, 4, 4)))
    ins = [x, p.sr_weight, p.sr_norm.weight, p.attn.k.weight]
    assert grad_check(lambda x, *_: sra_attention(x, p), ins) < 1e-5


# -- stochastic depth and block --------------------------------------------------------

def test_stochastic_depth_identity_cases(rng):
    x = leaf(rng.normal(size=(3, 2, 2, 4)))
    assert stochastic_depth(x, 0.0, True, rng) is x
    assert stochastic_depth(x, 0.7, False, rng) is x


def test_stochastic_depth_rate_one_rejected(rng):
    with pytest.raises(ParameterError):
        stochastic_depth(leaf(np.ones((1, 1, 1, 1))), 1.0, True, rng)


def test_stochastic_depth_monte_carlo_mean():
    rng = np.random.default_rng(0)
    branch = Tensor(np.ones((100_000, 1, 1, 1)))
    out = stochastic_depth(branch, 0.3, True, rng).data
    assert set(np.unique(out).round(12)) <= {0.0, round(1 / 0.7, 12)}
    assert abs(out.mean() - 1.0) < 0.02


def make_block(rng, C=4, heads=2, window=2, shift=0, rate=0.0):
    return BlockParams(LayerNormParams.init(C, F64),
                       WindowAttnParams.init(rng, C, heads, window, shift, dtype=F64),
                       LayerNormParams.init(C, F64), MlpParams.init(rng, C, 4, F64), rate)


def test_block_zero_branches_is_identity(rng):
    b = make_block(rng)
    for t in (b.attn.attn.o.weight, b.attn.attn.o.bias, b.mlp.fc2.weight, b.mlp.fc2.bias):
        t.data[:] = 0
    x = rng.normal(size=(2, 4, 4, 4))
    assert np.array_equal(transformer_block(leaf(x), b).data, x)


def test_block_fully_dropped_is_identity(rng):
    b = make_block(rng, rate=1 - 1e-12)
    x = rng.normal(size=(2, 4, 4, 4))
    out = transformer_block(leaf(x), b, training=True, rng=np.random.default_rng(0)).data
    assert np.array_equal(out, x)


def test_block_structure_matches_prenorm_formula(rng):
    from datkit.ops import layer_norm
    b = make_block(rng, shift=1)
    x = leaf(rng.normal(size=(1, 4, 4, 4)))
    z1 = x + window_attention(layer_norm(x, b.norm1.weight, b.norm1.bias), b.attn)
    z2 = z1 + b.mlp(layer_norm(z1, b.norm2.weight, b.norm2.bias))
    np.testing.assert_array_equal(transformer_block(x, b).data, z2.data)


def test_block_gradcheck(rng):
    b = make_block(rng, C=4, heads=2, window=2, shift=1)
    x = leaf(rng.normal(size=(1, 4, 4, 4)))
    ins = [x, b.norm1.weight, b.attn.bias_table, b.attn.attn.k.weight, b.mlp.fc1.weight,
           b.mlp.fc2.bias, b.norm2.bias]
    assert grad_check(lambda x, *_: transformer_block(x, b), ins) < 1e-5
