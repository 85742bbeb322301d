"""The attentive normalization layer: mixing, reductions, freezing."""

import numpy as np
import pytest

from attnorm import (AttentiveNorm2d, BatchNorm2d, GroupNorm2d, ShapeError,
                     effective_affine)
from attnorm.checks import make_attentive_layer
from attnorm.gradcheck import finite_diff_check

from oracles import an_recalibrate_loops


class ConstantWeights:
    """Attention stub returning a fixed lambda; no parameters."""

    def __init__(self, lam):
        self.lam = np.asarray(lam)

    def named_params(self, prefix=""):
        return []

    def named_buffers(self, prefix=""):
        return []

    def forward(self, x, mode="train"):
        return np.broadcast_to(self.lam, (x.shape[0],) + self.lam.shape[-1:]).copy()

    def backward(self, dlam):
        return 0.0


def test_init_statistics_of_mixture():
    # 1e6 draws: gamma ~ 1 + 0.1 N(0,1), beta ~ 0.1 N(0,1)
    layer = AttentiveNorm2d(1000, 1000, seed=0, dtype=np.float64)
    g = layer.mixture_gamma.value
    b = layer.mixture_beta.value
    assert abs(g.mean() - 1.0) < 1e-3
    assert abs(g.std() - 0.1) < 1e-3
    assert abs(b.mean()) < 1e-3
    assert abs(b.std() - 0.1) < 1e-3


def test_init_is_deterministic():
    a = AttentiveNorm2d(16, 5, seed=42)
    b = AttentiveNorm2d(16, 5, seed=42)
    assert np.array_equal(a.mixture_gamma.value, b.mixture_gamma.value)
    assert np.array_equal(a.mixture_beta.value, b.mixture_beta.value)
    assert np.array_equal(a.attnet.fc_weight.value, b.attnet.fc_weight.value)


def test_effective_affine_singleton():
    gamma = np.array([[1.0, 2.0, 3.0]])
    beta = np.array([[0.5, 0.0, -1.0]])
    lam = np.ones((4, 1))
    ge, be = effective_affine(lam, gamma, beta)
    assert np.array_equal(ge, np.tile(gamma, (4, 1)))
    assert np.array_equal(be, np.tile(beta, (4, 1)))


def test_effective_affine_hand_computed():
    lam = np.array([[0.3, 0.7]])
    gamma = np.array([[1.0], [2.0]])
    beta = np.array([[0.0], [1.0]])
    ge, be = effective_affine(lam, gamma, beta)
    assert abs(ge[0, 0] - 1.7) <= 1e-12
    assert abs(be[0, 0] - 0.7) <= 1e-12


def test_effective_affine_equal_components_collapse():
    rng = np.random.default_rng(0)
    gamma_row = rng.standard_normal(6)
    beta_row = rng.standard_normal(6)
    gamma = np.tile(gamma_row, (4, 1))
    beta = np.tile(beta_row, (4, 1))
    lam = rng.dirichlet(np.ones(4), size=3)  # row-stochastic
    ge, be = effective_affine(lam, gamma, beta)
    assert np.max(np.abs(ge - gamma_row)) <= 1e-12
    assert np.max(np.abs(be - beta_row)) <= 1e-12


def test_effective_affine_dimension_error():
    with pytest.raises(ShapeError):
        effective_affine(np.ones((2, 3)), np.ones((4, 6)), np.ones((4, 6)))


def test_forward_hand_computed_mixture():
    # lam=(0.3,0.7), gamma=(1,2), beta=(0,1), xhat=1 -> 2.4
    layer = AttentiveNorm2d(1, 2, backbone="gn", groups=1, seed=0,
                            dtype=np.float64)
    layer.mixture_gamma.value[...] = [[1.0], [2.0]]
    layer.mixture_beta.value[...] = [[0.0], [1.0]]
    layer.attnet = ConstantWeights(np.array([0.3, 0.7]))
    # x chosen so standardization yields xhat = (-1, 1) on two pixels
    x = np.array([[-1.0, 1.0]]).reshape(1, 1, 1, 2)
    out = layer.forward(x, "train")
    xhat = 1.0 / np.sqrt(1.0 + layer.eps)
    expected = 0.3 * xhat + 0.7 * (2.0 * xhat + 1.0)
    assert abs(out[0, 0, 0, 1] - expected) <= 1e-12
    assert abs(expected - 2.4) < 1e-4


def test_k1_constant_lambda_reduces_to_vanilla_bn():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 6, 5, 5))
    layer = AttentiveNorm2d(6, 1, backbone="bn", seed=3, dtype=np.float64)
    layer.attnet = ConstantWeights(np.array([1.0]))
    bn = BatchNorm2d(6, dtype=np.float64)
    bn.gamma.value[...] = layer.mixture_gamma.value[0]
    bn.beta.value[...] = layer.mixture_beta.value[0]
    assert np.max(np.abs(layer.forward(x, "train")
                         - bn.forward(x, "train"))) <= 1e-12
    # and in eval mode, with the running statistics both layers accumulated
    assert np.max(np.abs(layer.forward(x, "eval")
                         - bn.forward(x, "eval"))) <= 1e-12


def test_k1_constant_lambda_reduces_to_vanilla_gn():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 5, 5))
    layer = AttentiveNorm2d(8, 1, backbone="gn", groups=4, seed=4,
                            dtype=np.float64)
    layer.attnet = ConstantWeights(np.array([1.0]))
    gn = GroupNorm2d(8, groups=4, dtype=np.float64)
    gn.gamma.value[...] = layer.mixture_gamma.value[0]
    gn.beta.value[...] = layer.mixture_beta.value[0]
    assert np.max(np.abs(layer.forward(x, "train") - gn.forward(x))) <= 1e-12


def test_softmax_with_identical_components_collapses():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 6, 5, 5))
    layer = AttentiveNorm2d(6, 5, backbone="bn", choice=2,
                            activation="softmax", seed=5, dtype=np.float64)
    row_g = rng.uniform(0.5, 1.5, 6)
    row_b = rng.standard_normal(6)
    layer.mixture_gamma.value[...] = row_g
    layer.mixture_beta.value[...] = row_b
    out = layer.forward(x, "train")
    bn = BatchNorm2d(6, dtype=np.float64)
    bn.gamma.value[...] = row_g
    bn.beta.value[...] = row_b
    assert np.max(np.abs(out - bn.forward(x, "train"))) <= 1e-10


def test_sum_orders_agree():
    # applying the mixed affine equals summing K recalibrated maps
    rng = np.random.default_rng(4)
    layer = AttentiveNorm2d(6, 4, backbone="gn", groups=2, seed=6,
                            dtype=np.float64)
    x = rng.standard_normal((3, 6, 4, 4))
    out = layer.forward(x, "train")
    lam = layer.last_weights()
    from attnorm.normalize import compute_block_moments, group_blocks, standardize
    stats = compute_block_moments(x, group_blocks(2), layer.eps)
    xhat = standardize(x, stats)
    per_component = an_recalibrate_loops(xhat, lam, layer.mixture_gamma.value,
                                         layer.mixture_beta.value)
    assert np.max(np.abs(out - per_component)) <= 1e-12


def test_instance_locality_under_gn_backbone():
    rng = np.random.default_rng(5)
    layer = AttentiveNorm2d(8, 3, backbone="gn", groups=4, seed=7,
                            dtype=np.float64)
    x = rng.standard_normal((4, 8, 5, 5))
    out = layer.forward(x, "train")
    perm = np.array([2, 0, 3, 1])
    out_perm = layer.forward(x[perm], "train")
    assert np.max(np.abs(out[perm] - out_perm)) <= 1e-12


def test_instances_couple_under_bn_backbone_train():
    # batch moments tie instances together: changing one instance changes
    # another's output; document the coupling by asserting it
    rng = np.random.default_rng(6)
    layer = AttentiveNorm2d(8, 3, backbone="bn", seed=8, dtype=np.float64)
    x = rng.standard_normal((4, 8, 5, 5))
    out = layer.forward(x, "train")
    x2 = x.copy()
    x2[3] += 10.0
    out2 = layer.forward(x2, "train")
    assert np.max(np.abs(out[0] - out2[0])) > 1e-6


def test_lambda_shape_and_range():
    rng = np.random.default_rng(7)
    layer = AttentiveNorm2d(8, 6, backbone="bn", activation="hsigmoid",
                            seed=9, dtype=np.float64)
    layer.forward(rng.standard_normal((5, 8, 4, 4)), "train")
    lam = layer.last_weights()
    assert lam.shape == (5, 6)
    assert lam.min() >= 0.0 and lam.max() <= 1.0


def test_zero_cotangent_zero_gradients():
    rng = np.random.default_rng(8)
    layer = AttentiveNorm2d(8, 3, seed=10, dtype=np.float64)
    x = rng.standard_normal((3, 8, 4, 4))
    out = layer.forward(x, "train")
    layer.zero_grads()
    dx = layer.backward(np.zeros_like(out))
    assert np.all(dx == 0.0)
    for _, p in layer.named_params():
        assert np.all(p.grad == 0.0)


@pytest.mark.parametrize("backbone", ["bn", "gn"])
@pytest.mark.parametrize("choice", [1, 2])
@pytest.mark.parametrize("activation",
                         ["relu", "sigmoid", "softmax", "hsigmoid"])
def test_full_layer_gradients(backbone, choice, activation):
    layer, x = make_attentive_layer(backbone, choice, activation)
    res = finite_diff_check(layer, x, base_h=1e-4)
    assert res.max_rel_error <= 1e-4


def test_gradcheck_hsigmoid_choice1_smooth_window():
    layer, x = make_attentive_layer("bn", 1, "hsigmoid")
    pre = layer.attnet.preactivations()
    assert np.all(np.abs(pre) < 2.5)
    res = finite_diff_check(layer, x)
    assert res.max_rel_error <= 1e-4


def test_frozen_mixture_zeroes_mixture_cotangents_only():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 8, 4, 4))
    g = rng.standard_normal((4, 8, 4, 4))

    def run(frozen):
        layer = AttentiveNorm2d(8, 3, seed=11, dtype=np.float64)
        layer.forward(x, "train")  # populate running stats
        if frozen:
            layer.freeze_for_finetune()
        layer.forward(x, "train")
        layer.zero_grads()
        layer.backward(g)
        return layer

    frozen = run(True)
    assert np.all(frozen.mixture_gamma.grad == 0.0)
    assert np.all(frozen.mixture_beta.grad == 0.0)
    assert not np.all(frozen.attnet.fc_weight.grad == 0.0)


def test_frozen_standardization_train_equals_eval():
    # the frozen layer standardizes with running statistics in both modes
    rng = np.random.default_rng(10)
    layer = AttentiveNorm2d(8, 3, seed=12, dtype=np.float64)
    for _ in range(5):
        layer.forward(rng.standard_normal((4, 8, 4, 4)), "train")
    layer.freeze_for_finetune()
    x = rng.standard_normal((4, 8, 4, 4))
    layer.forward(x, "train")
    xhat_train = layer._cache[1]
    layer.forward(x, "eval")
    xhat_eval = layer._cache[1]
    assert np.max(np.abs(xhat_train - xhat_eval)) <= 1e-12


def test_fully_frozen_attn_bn_makes_modes_identical():
    # with the attention subnet's bn also pinned, the whole layer output
    # is mode-independent after freezing
    rng = np.random.default_rng(10)
    layer = AttentiveNorm2d(8, 3, seed=12, dtype=np.float64,
                            freeze_attn_bn_on_finetune=True)
    for _ in range(5):
        layer.forward(rng.standard_normal((4, 8, 4, 4)), "train")
    layer.freeze_for_finetune()
    x = rng.standard_normal((4, 8, 4, 4))
    assert np.max(np.abs(layer.forward(x, "train")
                         - layer.forward(x, "eval"))) <= 1e-12


def test_frozen_running_stats_stop_updating():
    rng = np.random.default_rng(11)
    layer = AttentiveNorm2d(8, 3, seed=13, dtype=np.float64)
    layer.forward(rng.standard_normal((4, 8, 4, 4)), "train")
    layer.freeze_for_finetune()
    before = (layer.running.mean.copy(), layer.running.var.copy(),
              layer.running.count)
    layer.forward(rng.standard_normal((4, 8, 4, 4)) + 3.0, "train")
    assert np.array_equal(layer.running.mean, before[0])
    assert np.array_equal(layer.running.var, before[1])
    assert layer.running.count == before[2]
