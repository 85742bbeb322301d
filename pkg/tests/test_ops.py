"""Tensor primitives against naive loop oracles and their contracts."""

import numpy as np
import pytest

from attnorm import Conv2d, GlobalAvgPool, Linear, MaxPool2d, ReLU, ShapeError

from oracles import avg_pool_loops, conv2d_loops, matmul_loops, max_pool_loops


def test_conv_identity_kernel():
    conv = Conv2d(1, 1, 1, dtype=np.float64)
    conv.weight.value[...] = 1.0
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    assert np.array_equal(conv.forward(x), x)


def test_conv_counting_overlap():
    conv = Conv2d(1, 1, 3, stride=1, pad=1, dtype=np.float64)
    conv.weight.value[...] = 1.0
    x = np.ones((1, 1, 3, 3))
    out = conv.forward(x)
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == 4.0


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    conv = Conv2d(3, 4, 3, stride=1, pad=0, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 5, 5))
    expected = conv2d_loops(x, conv.weight.value, 1, 0)
    assert np.max(np.abs(conv.forward(x) - expected)) <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_conv_random_shapes_against_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(1, 4))
    cin = int(rng.integers(1, 5))
    cout = int(rng.integers(1, 5))
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.choice([0, 1]))
    h = int(rng.integers(k + 1, 8))
    w = int(rng.integers(k + 1, 8))
    conv = Conv2d(cin, cout, k, stride=stride, pad=pad, rng=rng,
                  dtype=np.float64)
    x = rng.standard_normal((n, cin, h, w))
    expected = conv2d_loops(x, conv.weight.value, stride, pad)
    assert np.max(np.abs(conv.forward(x) - expected)) <= 1e-12


def test_conv_channel_mismatch_raises():
    conv = Conv2d(3, 4, 3, dtype=np.float64)
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 2, 5, 5)))


def test_conv_kernel_larger_than_input_raises():
    conv = Conv2d(1, 1, 5, dtype=np.float64)
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 1, 3, 3)))


def test_conv_backward_matches_oracle_gradients():
    # dL/dx and dL/dw of sum(out * g) computed by perturbing the oracle
    rng = np.random.default_rng(7)
    conv = Conv2d(2, 3, 3, stride=2, pad=1, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 2, 6, 6))
    out = conv.forward(x)
    g = rng.standard_normal(out.shape)
    conv.zero_grads()
    dx = conv.backward(g)
    w = conv.weight.value
    h = 1e-6
    for idx in [(0, 0, 0, 0), (1, 1, 3, 4), (0, 1, 5, 2)]:
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        num = (np.sum(conv2d_loops(xp, w, 2, 1) * g)
               - np.sum(conv2d_loops(xm, w, 2, 1) * g)) / (2 * h)
        assert abs(dx[idx] - num) <= 1e-6
    for idx in [(0, 0, 0, 0), (2, 1, 2, 2)]:
        wp = w.copy()
        wp[idx] += h
        wm = w.copy()
        wm[idx] -= h
        num = (np.sum(conv2d_loops(x, wp, 2, 1) * g)
               - np.sum(conv2d_loops(x, wm, 2, 1) * g)) / (2 * h)
        assert abs(conv.weight.grad[idx] - num) <= 1e-6


def test_global_avg_pool_constant():
    gap = GlobalAvgPool()
    x = np.full((2, 3, 4, 4), 7.0)
    assert np.array_equal(gap.forward(x), np.full((2, 3, 1, 1), 7.0))


def test_global_avg_pool_small_case():
    gap = GlobalAvgPool()
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert gap.forward(x)[0, 0, 0, 0] == 2.5


@pytest.mark.parametrize("seed", range(20))
def test_global_avg_pool_against_oracle(seed):
    rng = np.random.default_rng(300 + seed)
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)),
             int(rng.integers(1, 7)), int(rng.integers(1, 7)))
    x = rng.standard_normal(shape)
    assert np.max(np.abs(GlobalAvgPool().forward(x)
                         - avg_pool_loops(x))) <= 1e-12


def test_linear_identity():
    fc = Linear(3, 3, dtype=np.float64)
    fc.weight.value[...] = np.eye(3)
    fc.bias.value[...] = 0.0
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(fc.forward(x), x)


def test_linear_dot_product():
    fc = Linear(2, 1, dtype=np.float64)
    fc.weight.value[...] = [[1.0, 1.0]]
    fc.bias.value[...] = 0.0
    assert fc.forward(np.array([[3.0, 4.0]]))[0, 0] == 7.0


@pytest.mark.parametrize("seed", range(20))
def test_linear_against_oracle(seed):
    rng = np.random.default_rng(400 + seed)
    din = int(rng.integers(1, 10))
    dout = int(rng.integers(1, 8))
    n = int(rng.integers(1, 5))
    fc = Linear(din, dout, rng=rng, dtype=np.float64)
    x = rng.standard_normal((n, din))
    expected = matmul_loops(x, fc.weight.value, fc.bias.value)
    assert np.max(np.abs(fc.forward(x) - expected)) <= 1e-12


def test_linear_dimension_mismatch():
    fc = Linear(4, 2, dtype=np.float64)
    with pytest.raises(ShapeError):
        fc.forward(np.zeros((1, 5)))


def test_relu_derivative_at_zero_is_zero():
    relu = ReLU()
    x = np.array([[[[-1.0, 0.0, 2.0]]]])
    out = relu.forward(x)
    assert np.array_equal(out, [[[[0.0, 0.0, 2.0]]]])
    dx = relu.backward(np.ones_like(x))
    assert np.array_equal(dx, [[[[0.0, 0.0, 1.0]]]])


@pytest.mark.parametrize("seed", range(8))
def test_max_pool_against_oracle(seed):
    rng = np.random.default_rng(500 + seed)
    x = rng.standard_normal((2, 3, int(rng.integers(4, 9)),
                             int(rng.integers(4, 9))))
    pool = MaxPool2d(3, 2, 1)
    assert np.max(np.abs(pool.forward(x)
                         - max_pool_loops(x, 3, 2, 1))) <= 1e-12


def test_backward_is_linear_in_cotangent():
    # backward(a*g1 + b*g2) == a*backward(g1) + b*backward(g2)
    rng = np.random.default_rng(9)
    layers = [
        (Conv2d(3, 4, 3, pad=1, rng=rng, dtype=np.float64), (2, 3, 5, 5)),
        (Linear(6, 4, rng=rng, dtype=np.float64), (3, 6)),
        (GlobalAvgPool(), (2, 3, 4, 4)),
        (ReLU(), (2, 3, 4, 4)),
    ]
    for layer, shape in layers:
        x = rng.standard_normal(shape)
        out = layer.forward(x)
        g1 = rng.standard_normal(out.shape)
        g2 = rng.standard_normal(out.shape)
        a, b = 0.7, -1.3
        layer.zero_grads()
        d1 = layer.backward(g1)
        layer.zero_grads()
        d2 = layer.backward(g2)
        layer.zero_grads()
        dc = layer.backward(a * g1 + b * g2)
        assert np.max(np.abs(dc - (a * d1 + b * d2))) <= 1e-10


def test_zero_cotangent_gives_zero_gradients():
    rng = np.random.default_rng(11)
    conv = Conv2d(3, 4, 3, pad=1, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 5, 5))
    out = conv.forward(x)
    conv.zero_grads()
    dx = conv.backward(np.zeros_like(out))
    assert np.all(dx == 0.0)
    assert np.all(conv.weight.grad == 0.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(13)
    conv = Conv2d(3, 4, 3, pad=1, rng=np.random.default_rng(5))
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    a = conv.forward(x)
    b = conv.forward(x)
    assert np.array_equal(a, b)
    conv2 = Conv2d(3, 4, 3, pad=1, rng=np.random.default_rng(5))
    assert np.array_equal(conv.weight.value, conv2.weight.value)
