"""The finite-difference checker itself plus per-op gradient checks."""

import numpy as np
import pytest

from attnorm import Conv2d, GlobalAvgPool, Linear, NumericError, ReLU
from attnorm.gradcheck import finite_diff_check


def test_linear_op_is_exact_up_to_roundoff():
    # central differences are exact on linear maps
    rng = np.random.default_rng(0)
    fc = Linear(8, 5, rng=rng, dtype=np.float64)
    res = finite_diff_check(fc, rng.standard_normal((2, 8)))
    assert res.max_rel_error <= 1e-9


def test_relu_away_from_kink():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.where(np.abs(x) < 0.11, x + 0.5, x)
    res = finite_diff_check(ReLU(), x)
    assert res.max_rel_error <= 1e-6


def test_conv_gradcheck():
    rng = np.random.default_rng(2)
    conv = Conv2d(3, 4, 3, stride=1, pad=1, rng=rng, dtype=np.float64)
    res = finite_diff_check(conv, rng.standard_normal((2, 3, 5, 5)))
    assert res.max_rel_error <= 1e-4


def test_gap_gradcheck():
    rng = np.random.default_rng(3)
    res = finite_diff_check(GlobalAvgPool(), rng.standard_normal((2, 4, 5, 5)))
    assert res.max_rel_error <= 1e-9


def test_nonfinite_forward_is_reported():
    class Bad:
        def named_params(self):
            return []

        def zero_grads(self):
            pass

        def forward(self, x, mode="train"):
            return x / 0.0

        def backward(self, g):
            return g

    with pytest.raises(NumericError):
        finite_diff_check(Bad(), np.ones(3))


def test_subsampling_limits_coordinates():
    rng = np.random.default_rng(4)
    fc = Linear(50, 40, rng=rng, dtype=np.float64)
    res = finite_diff_check(fc, rng.standard_normal((2, 50)), max_coords=10)
    assert res.max_rel_error <= 1e-9


def test_worst_records_are_sorted():
    rng = np.random.default_rng(5)
    conv = Conv2d(2, 2, 3, pad=1, rng=rng, dtype=np.float64)
    res = finite_diff_check(conv, rng.standard_normal((1, 2, 4, 4)))
    rels = [r[3] for r in res.worst]
    assert rels == sorted(rels, reverse=True)
