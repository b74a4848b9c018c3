import numpy as np
import pytest

from lmbisnet.tensor import (
    BatchNormState,
    ConvParams,
    NonFiniteError,
    add,
    add_backward,
    batchnorm2d,
    batchnorm2d_backward,
    conv2d,
    conv2d_backward,
    conv_transpose2d,
    conv_transpose2d_backward,
    grad_check,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    softmax_channels,
    softmax_channels_backward,
)
from oracles import naive_conv2d

SEEDS = range(20)


def _conv_closure(k, stride=1, padding=None):
    def f(x, w, b, r):
        p = ConvParams(w, b, stride=stride, padding=padding)
        y = conv2d(x, p)
        dx, dw, db = conv2d_backward(x, p, r)
        return float((y * r).sum()), (dx, dw, db, y)

    return f


# -- conv2d --------------------------------------------------------------------


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 7)).astype(np.float32)
    y = conv2d(x, ConvParams(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32)))
    np.testing.assert_array_equal(y, x)


def test_conv2d_all_ones_3x3():
    x = np.ones((1, 1, 3, 3), np.float32)
    y = conv2d(x, ConvParams(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32)))
    expected = naive_conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    np.testing.assert_array_equal(expected[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])
    np.testing.assert_array_equal(y, expected)


def test_conv2d_zero_input_gives_bias_planes():
    b = np.array([0.5, -2.0, 3.0], np.float32)
    w = np.random.default_rng(1).normal(size=(3, 2, 3, 3)).astype(np.float32)
    y = conv2d(np.zeros((1, 2, 4, 4), np.float32), ConvParams(w, b))
    for c in range(3):
        assert np.all(y[0, c] == b[c])


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("seed", range(3))
def test_conv2d_matches_naive_loop(k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    y = conv2d(x, ConvParams(w, b))
    assert y.shape == (2, 4, 6, 5)
    np.testing.assert_allclose(y, naive_conv2d(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv2d_strided_matches_naive_loop():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 2, 2)), rng.normal(size=3)
    y = conv2d(x, ConvParams(w, b, stride=2, padding=0))
    np.testing.assert_allclose(y, naive_conv2d(x, w, b, stride=2, pad=0), atol=1e-12)


def test_conv2d_errors():
    w = np.zeros((2, 3, 3, 3), np.float32)
    with pytest.raises(ValueError, match="channels"):
        conv2d(np.zeros((1, 2, 4, 4), np.float32), ConvParams(w, np.zeros(2, np.float32)))
    with pytest.raises(ValueError, match="odd"):
        conv2d(np.zeros((1, 3, 4, 4), np.float32), ConvParams(np.zeros((2, 3, 2, 2)), np.zeros(2)))


def test_conv2d_signals_non_finite():
    x = np.full((1, 1, 2, 2), np.float32(3e38))
    p = ConvParams(np.full((1, 1, 3, 3), np.float32(10)), np.zeros(1, np.float32))
    with pytest.raises(NonFiniteError):
        conv2d(x, p)


def test_conv2d_backward_zero_upstream():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 4, 4))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    for g in conv2d_backward(x, p, np.zeros((1, 3, 4, 4))):
        assert not g.any()


def test_conv2d_backward_bias_is_upstream_sum():
    rng = np.random.default_rng(1)
    x, dy = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 3, 5, 5))
    _, _, db = conv2d_backward(x, ConvParams(rng.normal(size=(3, 2, 3, 3)), np.zeros(3)), dy)
    expected = [sum(dy[n, c].sum() for n in range(2)) for c in range(3)]
    np.testing.assert_allclose(db, expected, rtol=1e-12)


def test_conv2d_backward_shape_mismatch():
    p = ConvParams(np.zeros((3, 2, 3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        conv2d_backward(np.zeros((1, 2, 4, 4)), p, np.zeros((1, 3, 5, 4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradients_finite_difference(seed):
    rng = np.random.default_rng(seed)
    n, c, h = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(3, 9))
    o, k = int(rng.integers(1, 4)), int(rng.choice([1, 3, 5]))
    err = grad_check(
        _conv_closure(k),
        [rng.normal(size=(n, c, h, h)), rng.normal(size=(o, c, k, k)), rng.normal(size=o), rng.normal(size=(n, o, h, h))],
    )
    assert err < 1e-4


def test_conv2d_gradients_single_4x4():
    rng = np.random.default_rng(42)
    err = grad_check(
        _conv_closure(3),
        [rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 3, 3)), rng.normal(size=1), rng.normal(size=(1, 1, 4, 4))],
    )
    assert err < 1e-4


@pytest.mark.parametrize("k", [1, 3, 5])
def test_same_padding_preserves_spatial_dims(k):
    x = np.zeros((1, 2, 7, 9), np.float32)
    assert conv2d(x, ConvParams(np.zeros((3, 2, k, k), np.float32), np.zeros(3, np.float32))).shape == (1, 3, 7, 9)


# -- relu ----------------------------------------------------------------------


def test_relu_values():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(relu(x).ravel(), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(x, np.ones_like(x)).ravel(), [0, 0, 1])


def test_relu_all_negative():
    x = -np.abs(np.random.default_rng(0).normal(size=(1, 2, 3, 3))) - 0.1
    assert not relu(x).any()
    assert not relu_backward(x, np.ones_like(x)).any()


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_finite_difference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    x[np.abs(x) < 1e-2] = 0.5  # keep away from the kink
    r = rng.normal(size=x.shape)

    def f(x):
        return float((relu(x) * r).sum()), (relu_backward(x, r),)

    assert grad_check(f, [x]) < 1e-4


# -- add -----------------------------------------------------------------------


def test_add_identities_and_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(add(a, np.zeros_like(a)), a)
    assert not add(a, -a).any()
    s = add(a, b)
    for idx in np.ndindex(a.shape):
        assert s[idx] == a[idx] + b[idx]
    da, db = add_backward(b)
    assert da is b and db is b
    with pytest.raises(ValueError):
        add(a, b[:, :2])


def test_add_grad_check_linear():
    rng = np.random.default_rng(0)

    def f(a, b):
        return float(add(a, b).sum()), add_backward(np.ones_like(a))

    assert grad_check(f, [rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3))]) < 1e-10


# -- batchnorm -----------------------------------------------------------------


def test_batchnorm_constant_channel():
    x = np.full((2, 1, 3, 3), 4.0, np.float32)
    y, _ = batchnorm2d(x, BatchNormState.fresh(1), training=True)
    np.testing.assert_allclose(y, 0.0, atol=1e-6)


def test_batchnorm_infer_identity():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 4)).astype(np.float32)
    state = BatchNormState.fresh(3)
    before = state.running_mean.copy(), state.running_var.copy()
    y, _ = batchnorm2d(x, state, training=False)
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-6)
    np.testing.assert_array_equal(state.running_mean, before[0])
    np.testing.assert_array_equal(state.running_var, before[1])


def test_batchnorm_hand_example():
    x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
    state = BatchNormState(np.array([2.0]), np.array([1.0]), eps=1e-12)
    y, _ = batchnorm2d(x, state, training=True)
    np.testing.assert_allclose(y.ravel(), [-1.0, 3.0], atol=1e-9)


def test_batchnorm_running_stats_update():
    x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
    state = BatchNormState.fresh(1, np.float64)
    batchnorm2d(x, state, training=True)
    np.testing.assert_allclose(state.running_mean, [0.9 * 0 + 0.1 * 2.0])
    np.testing.assert_allclose(state.running_var, [0.9 * 1 + 0.1 * 1.0])


def test_batchnorm_uninitialized_infer_raises():
    state = BatchNormState(np.ones(1), np.zeros(1))
    with pytest.raises(ValueError, match="running"):
        batchnorm2d(np.zeros((1, 1, 2, 2)), state, training=False)


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_train_output_moments(seed):
    rng = np.random.default_rng(seed)
    x = (rng.normal(size=(2, 4, 2, 2)) * 3 + 1).astype(np.float32)
    y, _ = batchnorm2d(x, BatchNormState.fresh(4), training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)


@pytest.mark.parametrize("training", [True, False])
@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_finite_difference(seed, training):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 5))
    shape = (int(rng.integers(1, 3)), c, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    r = rng.normal(size=shape)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2, size=c)

    def f(x, gamma, beta):
        state = BatchNormState(gamma, beta, rm.copy(), rv.copy())
        y, cache = batchnorm2d(x, state, training)
        dx, dg, db = batchnorm2d_backward(cache, r)
        return float((y * r).sum()), (dx, dg, db)

    assert grad_check(f, [rng.normal(size=shape) * 2, rng.normal(size=c), rng.normal(size=c)]) < 1e-4


# -- maxpool -------------------------------------------------------------------


def test_maxpool_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    y, idx = maxpool2(x)
    assert y.item() == 4.0 and idx.item() == 3


def test_maxpool_tie_break_top_left():
    y, idx = maxpool2(np.full((1, 2, 4, 4), 7.0))
    assert np.all(y == 7.0) and np.all(idx == 0)
    d = maxpool2_backward(idx, np.ones_like(y))
    assert np.all(d[:, :, ::2, ::2] == 1) and d.sum() == 8


def test_maxpool_odd_dims_rejected():
    with pytest.raises(ValueError, match="even"):
        maxpool2(np.zeros((1, 1, 5, 4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_finite_difference_and_mass(seed):
    rng = np.random.default_rng(seed)
    x = rng.permutation(64).reshape(1, 1, 8, 8).astype(np.float64) / 8.0  # distinct values, no ties
    r = rng.normal(size=(1, 1, 4, 4))

    def f(x):
        y, idx = maxpool2(x)
        return float((y * r).sum()), (maxpool2_backward(idx, r),)

    assert grad_check(f, [x]) < 1e-4
    _, idx = maxpool2(x)
    np.testing.assert_allclose(np.abs(maxpool2_backward(idx, r)).sum(), np.abs(r).sum())


# -- transposed convolution ----------------------------------------------------


def test_conv_transpose_single_pixel():
    y = conv_transpose2d(np.full((1, 1, 1, 1), 2.5), ConvParams(np.ones((1, 1, 2, 2)), np.zeros(1), stride=2))
    np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), 2.5))


def test_conv_transpose_zero_input_bias_only():
    b = np.array([1.0, -1.0])
    w = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
    y = conv_transpose2d(np.zeros((1, 3, 3, 4)), ConvParams(w, b, stride=2))
    assert y.shape == (1, 2, 6, 8)
    assert np.all(y[0, 0] == 1.0) and np.all(y[0, 1] == -1.0)


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ValueError):
        conv_transpose2d(np.zeros((1, 2, 2, 2)), ConvParams(np.zeros((3, 1, 2, 2)), np.zeros(1), stride=2))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    cx, cy, h = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 8))
    w = rng.normal(size=(cx, cy, 2, 2))
    x = rng.normal(size=(2, cx, h, h))
    y = rng.normal(size=(2, cy, 2 * h, 2 * h))
    lhs = (conv2d(y, ConvParams(w, np.zeros(cx), stride=2, padding=0)) * x).sum()
    rhs = (y * conv_transpose2d(x, ConvParams(w, np.zeros(cy), stride=2))).sum()
    assert abs(lhs - rhs) / max(abs(lhs), 1e-12) < 1e-5
    # and it equals the input-gradient of the strided convolution
    dx, _, _ = conv2d_backward(y, ConvParams(w, np.zeros(cx), stride=2, padding=0), x)
    np.testing.assert_allclose(dx, conv_transpose2d(x, ConvParams(w, np.zeros(cy), stride=2)), atol=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose_finite_difference(seed):
    rng = np.random.default_rng(seed)
    cx, cy, h = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 8))
    r = rng.normal(size=(1, cy, 2 * h, 2 * h))

    def f(x, w, b):
        p = ConvParams(w, b, stride=2)
        return float((conv_transpose2d(x, p) * r).sum()), conv_transpose2d_backward(x, p, r)

    assert grad_check(f, [rng.normal(size=(1, cx, h, h)), rng.normal(size=(cx, cy, 2, 2)), rng.normal(size=cy)]) < 1e-4


# -- softmax -------------------------------------------------------------------


def test_softmax_equal_logits():
    np.testing.assert_allclose(softmax_channels(np.zeros((1, 2, 3, 3))), 0.5)


def test_softmax_ln3():
    x = np.zeros((1, 2, 1, 1))
    x[0, 1] = np.log(3.0)
    np.testing.assert_allclose(softmax_channels(x).ravel(), [0.25, 0.75], rtol=1e-12)


def test_softmax_shift_invariance_and_large_logits():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    np.testing.assert_allclose(softmax_channels(x + 1000.0), softmax_channels(x), atol=1e-12)
    y = softmax_channels(x * 1e4)
    assert np.all(np.isfinite(y))


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_sums_and_finite_difference(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
    x = rng.normal(size=shape) * 3
    y = softmax_channels(x.astype(np.float32))
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert y.min() >= 0 and y.max() <= 1
    r = rng.normal(size=shape)

    def f(x):
        y = softmax_channels(x)
        return float((y * r).sum()), (softmax_channels_backward(y, r),)

    assert grad_check(f, [x]) < 1e-4


# -- grad_check itself -----------------------------------------------------------


def test_grad_check_conv_chain():
    rng = np.random.default_rng(7)
    w1, w2 = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(1, 3, 3, 3))

    def f(x):
        p1, p2 = ConvParams(w1, np.zeros(3)), ConvParams(w2, np.zeros(1))
        h = conv2d(x, p1)
        y = conv2d(h, p2)
        dh, _, _ = conv2d_backward(h, p2, np.ones_like(y))
        dx, _, _ = conv2d_backward(x, p1, dh)
        return float(y.sum()), (dx,)

    assert grad_check(f, [rng.normal(size=(1, 2, 6, 6))]) < 1e-4


def test_grad_check_detects_corrupted_gradient():
    rng = np.random.default_rng(0)
    base = _conv_closure(3)

    def corrupted(*args):
        v, gs = base(*args)
        return v, tuple(g * 1.01 for g in gs)

    inputs = [rng.normal(size=(1, 2, 6, 6)) * 10, rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2), rng.normal(size=(1, 2, 6, 6))]
    assert grad_check(base, inputs) < 1e-4
    assert grad_check(corrupted, inputs) > 1e-3


def test_grad_check_epsilon_range_and_non_finite():
    with pytest.raises(ValueError):
        grad_check(lambda x: (0.0, (x,)), [np.zeros(1)], epsilon=1e-2)
    with pytest.raises(NonFiniteError):
        grad_check(lambda x: (float("nan"), (x,)), [np.zeros(1)])
