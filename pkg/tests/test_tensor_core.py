import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datkit import DimensionError, ParameterError, PrecisionError, Tensor, backward
from datkit import tensor as T
from datkit.gradcheck import grad_check
from datkit.ops import (
    bilinear_sample,
    conv2d,
    cross_entropy,
    gelu,
    layer_norm,
    log_softmax,
    softmax_lastdim,
)


def f64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(f64(np.eye(2)), f64(b)).data, b)


def test_matmul_hand_product():
    a = f64([[1, 2], [3, 4]])
    b = f64([[5, 6], [7, 8]])
    assert np.array_equal((a @ b).data, [[19, 22], [43, 50]])


def test_matmul_zero_annihilates():
    out = T.matmul(f64(np.zeros((2, 3))), f64(np.random.default_rng(0).normal(size=(3, 4))))
    assert out.shape == (2, 4) and not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(f64(np.zeros((2, 3))), f64(np.zeros((4, 5))))


def test_matmul_batched_broadcast_grad():
    rng = np.random.default_rng(1)
    a = f64(rng.normal(size=(2, 3, 4)))
    b = f64(rng.normal(size=(4, 5)))
    assert grad_check(lambda a, b: a @ b, [a, b]) < 1e-8


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax_lastdim(f64([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_ln2():
    np.testing.assert_allclose(softmax_lastdim(f64([0.0, math.log(2.0)])).data, [1 / 3, 2 / 3],
                               atol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        softmax_lastdim(f64(np.zeros((2, 0))))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(row, c):
    x = np.array(row)
    y = softmax_lastdim(f64(x)).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(softmax_lastdim(f64(x + c)).data, y, atol=1e-12)


def test_softmax_f32_rows_sum():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32))
    y = softmax_lastdim(x).data
    assert y.dtype == np.float32
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_row():
    out = layer_norm(f64(np.full((2, 4), 3.0)), f64(np.ones(4)), f64(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_layer_norm_two_values():
    out = layer_norm(f64([1.0, 3.0]), f64(np.ones(2)), f64(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-10)


def test_layer_norm_beta_only():
    beta = np.array([0.5, -1.0, 2.0])
    out = layer_norm(f64(np.random.default_rng(0).normal(size=(4, 3))), f64(np.zeros(3)), f64(beta))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (4, 3)))


def test_layer_norm_eps_must_be_positive():
    with pytest.raises(ParameterError):
        layer_norm(f64(np.ones((1, 2))), f64(np.ones(2)), f64(np.zeros(2)), eps=0.0)


# -- gelu -----------------------------------------------------------------------

def test_gelu_values():
    x = f64([0.0, 1.0, -10.0])
    y = gelu(x).data
    assert y[0] == 0.0
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert abs(y[1] - phi1) < 1e-15
    assert abs(y[1] - 0.841345) < 1e-6
    assert abs(y[2]) < 1e-6


def test_gelu_gradcheck_half():
    assert grad_check(gelu, [f64([0.5])]) < 1e-8


# -- conv2d ----------------------------------------------------------------------

def test_conv_identity_1x1_bitwise():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
    out = conv2d(f64(x), f64(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_identity_1x1_multichannel_bitwise():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 4))
    out = conv2d(f64(x), f64(np.eye(3).reshape(3, 3, 1, 1)))
    assert np.array_equal(out.data, x)


def test_conv_tap_count():
    out = conv2d(f64(np.ones((1, 1, 5, 5))), f64(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 2] == 6


def test_conv_patchify_shape():
    out = conv2d(f64(np.ones((1, 3, 8, 8))), f64(np.ones((5, 3, 4, 4))), stride=4)
    assert out.shape == (1, 5, 2, 2)


def test_conv_group_divisibility():
    with pytest.raises(ParameterError):
        conv2d(f64(np.ones((1, 3, 4, 4))), f64(np.ones((4, 1, 1, 1))), groups=2)


def test_conv_depthwise_matches_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(3, 1, 3, 3))
    out = conv2d(f64(x), f64(w), stride=2, padding=1, groups=3).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 3, 3))
    for b in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    ref[b, c, i, j] = (xp[b, c, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[c, 0]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


# -- bilinear sampling -----------------------------------------------------------

def test_bilinear_corner():
    z = np.random.default_rng(0).normal(size=(3, 4, 2))
    out = bilinear_sample(f64(z), f64([[-1.0, -1.0], [1.0, 1.0]])).data
    assert np.array_equal(out[0], z[0, 0])
    assert np.array_equal(out[1], z[2, 3])


def test_bilinear_center_hand_value():
    z = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    assert bilinear_sample(f64(z), f64([[0.0, 0.0]])).data[0, 0] == 1.5


def test_bilinear_far_outside_is_zero():
    z = np.random.default_rng(0).normal(size=(3, 3, 4)) + 5
    out = bilinear_sample(f64(z), f64([[5.0, 5.0], [-3.5, 0.0]])).data
    assert np.array_equal(out, np.zeros((2, 4)))


def test_bilinear_axis_order_is_row_then_column():
    z = np.arange(6, dtype=float).reshape(2, 3, 1)
    out = bilinear_sample(f64(z), f64([[-1.0, 1.0], [1.0, -1.0]])).data[:, 0]
    assert list(out) == [2.0, 3.0]


def test_bilinear_matches_hat_weights():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(4, 5, 3))
    pts = rng.uniform(-1.3, 1.3, size=(20, 2))
    out = bilinear_sample(f64(z), f64(pts)).data
    for p, o in zip(pts, out):
        py, px = (p[0] + 1) / 2 * 3, (p[1] + 1) / 2 * 4
        ref = sum(max(0, 1 - abs(px - rx)) * max(0, 1 - abs(py - ry)) * z[ry, rx]
                  for ry in range(4) for rx in range(5))
        np.testing.assert_allclose(o, ref, atol=1e-12)


def test_bilinear_grad_wrt_points():
    z = f64(np.random.default_rng(5).normal(size=(4, 4, 3)))
    pts = f64([[0.23, -0.41], [0.77, 0.12]])
    assert grad_check(bilinear_sample, [z, pts]) < 1e-6


def test_bilinear_partition_of_unity():
    pts = np.random.default_rng(6).uniform(-1, 1, size=(10_000, 2))
    w = bilinear_sample(f64(np.ones((5, 7, 1)), False), f64(pts, False)).data[:, 0]
    assert np.max(np.abs(w - 1.0)) < 1e-12


def test_bilinear_batched_equals_unbatched():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(2, 3, 3, 2))
    p = rng.uniform(-1, 1, size=(2, 5, 2))
    batched = bilinear_sample(f64(z), f64(p)).data
    for b in range(2):
        np.testing.assert_array_equal(batched[b], bilinear_sample(f64(z[b]), f64(p[b])).data)


# -- backward / gradcheck -------------------------------------------------------

def test_backward_sum_gives_ones():
    x = f64(np.random.default_rng(0).normal(size=(3, 2)))
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_matmul_vs_finite_differences():
    rng = np.random.default_rng(1)
    a, b = f64(rng.normal(size=(2, 3))), f64(rng.normal(size=(3, 4)))
    backward((a @ b).sum())
    np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T, atol=1e-14)
    assert grad_check(lambda a, b: (a @ b).sum(), [a, b]) < 1e-9


def test_backward_accumulates():
    x = f64([1.0, 2.0])
    y = (x * x).sum()
    backward(y)
    first = x.grad.copy()
    backward(y)
    assert np.array_equal(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_backward_seed_shape_mismatch():
    x = f64(np.ones((2, 2)))
    with pytest.raises(DimensionError):
        backward(x * 2.0, np.ones(3))


def test_backward_shared_input_sums_adjoints():
    x = f64(np.random.default_rng(2).normal(size=(3,)))
    fn = lambda x: T.tanh(x) * T.exp(x) + x  # noqa: E731
    assert grad_check(fn, [x]) < 1e-9


def test_gradcheck_linear_is_exact():
    x = f64(np.random.default_rng(3).normal(size=(4,)))
    assert grad_check(lambda x: x * 3.0 + 1.0, [x]) < 1e-10


def test_gradcheck_rejects_f32():
    with pytest.raises(PrecisionError):
        grad_check(gelu, [Tensor(np.ones(2, dtype=np.float32), requires_grad=True)])


def test_gradcheck_rejects_bad_eps():
    with pytest.raises(ParameterError):
        grad_check(gelu, [f64([0.1])], eps=1e-2)


OPS = {
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "softmax": (softmax_lastdim, [(3, 5)]),
    "log_softmax": (log_softmax, [(3, 5)]),
    "layer_norm": (lambda x, g, b: layer_norm(x, g, b), [(3, 4), (4,), (4,)]),
    "gelu": (gelu, [(3, 4)]),
    "tanh": (T.tanh, [(3, 4)]),
    "conv2d": (lambda x, w, b: conv2d(x, w, b, stride=2, padding=1, groups=2),
               [(1, 4, 5, 5), (6, 2, 3, 3), (6,)]),
    "bilinear_sample": (bilinear_sample, [(3, 4, 2), (6, 2)]),
    "roll_concat": (lambda a, b: T.concat([T.roll(a, 1, 0), b], axis=1), [(3, 2), (3, 3)]),
    "getitem": (lambda a: a[np.array([0, 2, 2, 1])] * 2.0, [(3, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_gradcheck_on_random_instances(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(10):
        ins = [f64(rng.uniform(-0.9, 0.9, size=s)) for s in shapes]
        assert grad_check(fn, ins, eps=1e-5) < 1e-5


def test_cross_entropy_value_and_grad():
    logits = f64([[0.0, math.log(2.0)], [1.0, 1.0]])
    loss = cross_entropy(logits, np.array([1, 0]))
    assert abs(loss.item() - 0.5 * (-math.log(2 / 3) - math.log(0.5))) < 1e-14
    assert grad_check(lambda z: cross_entropy(z, np.array([1, 0])), [logits]) < 1e-9
