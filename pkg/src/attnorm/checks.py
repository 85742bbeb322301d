"""The standard gradient-check suite: every differentiable building block
against central finite differences, in float64, at smooth points.

Attention activations are piecewise linear (relu, hard sigmoid), so the
layer factories below pin pre-activations inside safe regions: small fc
weights bound Choice-1 pre-activations near the bias, and Choice-2
pre-activations are bounded by |bn_gamma| * sqrt(N) around bn_beta since a
standardized column of N values cannot exceed sqrt(N) in magnitude.  Each
factory asserts its margin before the check runs.
"""

import numpy as np

from .attention import AttentionNet, SqueezeExcite
from .attentive import AttentiveNorm2d
from .errors import NumericError
from .gradcheck import finite_diff_check
from .networks import NormSpec, build_resnet, toy_spec, StageSpec, NetSpec
from .normalize import BatchNorm2d, GroupNorm2d
from .ops import Conv2d, GlobalAvgPool, Linear, MaxPool2d, ReLU

_KINK_MARGIN = 0.15


def _assert_smooth(kind, pre, margin=_KINK_MARGIN):
    pre = np.asarray(pre)
    if kind == "relu":
        dist = np.abs(pre).min()
    elif kind == "hsigmoid":
        dist = np.abs(np.abs(pre) - 3.0).min()
        if np.abs(pre).max() >= 3.0 + margin:
            # outside the clamp is also smooth (flat); only the boundary hurts
            pass
    else:
        return
    if dist < margin:
        raise NumericError(
            f"{kind} pre-activation within {dist:.3f} of a kink; "
            "adjust the test construction")


def make_attention_net(choice, activation, channels=8, k=3, n=4, hw=4,
                       summarizer="rsd", seed=3, dtype=np.float64):
    """AttentionNet plus an input whose pre-activations sit at smooth points."""
    rng = np.random.default_rng(seed)
    net = AttentionNet(channels, k, summarizer=summarizer, choice=choice,
                       activation=activation, rng=rng, dtype=dtype)
    if choice == 1:
        # shrink pre-activations toward the bias so piecewise-linear
        # activations stay away from their kinks
        net.fc_weight.value *= 0.05
        net.fc_bias.value[...] = 1.0
    else:
        # |standardized z| <= sqrt(N), so pre stays in beta +- gamma*sqrt(N);
        # full-size weights keep the batch variance of z well above eps
        net.bn_gamma.value[...] = 0.3
        net.bn_beta.value[...] = 1.0
    x = rng.standard_normal((n, channels, hw, hw))
    net.forward(x, "train")
    _assert_smooth(activation, net.preactivations())
    return net, x


def make_attentive_layer(backbone, choice, activation, channels=8, k=3, n=4,
                         hw=4, summarizer="rsd", seed=5, dtype=np.float64):
    """AttentiveNorm2d plus a smooth-point input, for any backbone/choice."""
    rng = np.random.default_rng(seed)
    layer = AttentiveNorm2d(channels, k, backbone=backbone, summarizer=summarizer,
                            choice=choice, activation=activation, rng=rng,
                            dtype=dtype)
    if choice == 1:
        layer.attnet.fc_weight.value *= 0.05
        layer.attnet.fc_bias.value[...] = 1.0
    else:
        layer.attnet.bn_gamma.value[...] = 0.3
        layer.attnet.bn_beta.value[...] = 1.0
    x = rng.standard_normal((n, channels, hw, hw))
    layer.forward(x, "train")
    _assert_smooth(activation, layer.attnet.preactivations())
    return layer, x


def micro_net(seed=11, channels=8, num_classes=3):
    """Two-basic-block net in float64 for the end-to-end check."""
    spec = NetSpec(
        stem="cifar",
        stages=(StageSpec("basic", channels, 1, 1),
                StageSpec("basic", channels * 2, 1, 2)),
        num_classes=num_classes,
        norm=NormSpec(kind="an", placement="bn2"),
        k_per_stage=(2, 3),
        dtype=np.float64,
    )
    net = build_resnet(spec, seed=seed)
    for _, layer in net.attentive_layers():
        layer.attnet.bn_gamma.value[...] = 0.3
        layer.attnet.bn_beta.value[...] = 1.0
    return net


class _LogitsOnFlat:
    """Adapter presenting a network over a fixed input shape as a Layer."""

    def __init__(self, net, shape):
        self.net = net
        self.shape = shape

    def named_params(self, prefix=""):
        return self.net.named_params(prefix)

    def zero_grads(self):
        self.net.zero_grads()

    def forward(self, x, mode="train"):
        return self.net.forward(x.reshape(self.shape), mode)

    def backward(self, g):
        return self.net.backward(g).reshape(-1)


def standard_suite():
    """(name, layer, input, mode, tolerance, base_h) for every checked op.

    Single ops use the default step 1e-3; layers that compose a
    normalization with further nonlinear stages use 1e-4 because the
    standardization curvature otherwise leaks truncation error into the
    comparison.
    """
    rng = np.random.default_rng(0)
    suite = []

    conv = Conv2d(3, 4, 3, stride=1, pad=1, rng=rng, dtype=np.float64)
    suite.append(("conv2d 3x3", conv, rng.standard_normal((2, 3, 5, 5)),
                  "train", 1e-4, 1e-3))
    conv_s = Conv2d(3, 2, 3, stride=2, pad=1, rng=rng, dtype=np.float64)
    suite.append(("conv2d 3x3/s2", conv_s, rng.standard_normal((2, 3, 7, 7)),
                  "train", 1e-4, 1e-3))
    fc = Linear(8, 5, bias=True, rng=rng, dtype=np.float64)
    suite.append(("fully_connected", fc, rng.standard_normal((2, 8)),
                  "train", 1e-9, 1e-3))
    suite.append(("global_avg_pool", GlobalAvgPool(),
                  rng.standard_normal((2, 4, 5, 5)), "train", 1e-9, 1e-3))
    suite.append(("max_pool 3x3/s2", MaxPool2d(3, 2, 1),
                  rng.standard_normal((2, 3, 8, 8)), "train", 1e-6, 1e-3))
    relu_in = rng.standard_normal((2, 3, 4, 4))
    relu_in = np.where(np.abs(relu_in) < 0.1, relu_in + 0.3, relu_in)
    suite.append(("relu", ReLU(), relu_in, "train", 1e-6, 1e-3))
    suite.append(("batch_norm (train)", BatchNorm2d(4, dtype=np.float64),
                  rng.standard_normal((3, 4, 4, 4)), "train", 1e-4, 1e-3))
    suite.append(("group_norm g=2", GroupNorm2d(4, 2, dtype=np.float64),
                  rng.standard_normal((2, 4, 4, 4)), "train", 1e-4, 1e-3))
    se = SqueezeExcite(8, r=2, rng=rng, dtype=np.float64)
    suite.append(("squeeze_excite", se, rng.standard_normal((2, 8, 4, 4)),
                  "train", 1e-4, 1e-3))

    for choice in (1, 2):
        for act in ("relu", "sigmoid", "softmax", "hsigmoid"):
            net, x = make_attention_net(choice, act)
            suite.append((f"attention_weights c{choice}/{act}", net, x,
                          "train", 1e-4, 1e-4))

    for backbone in ("bn", "gn"):
        for choice in (1, 2):
            for act in ("relu", "sigmoid", "softmax", "hsigmoid"):
                layer, x = make_attentive_layer(backbone, choice, act)
                suite.append((f"attentive_norm {backbone}/c{choice}/{act}",
                              layer, x, "train", 1e-4, 1e-4))
    return suite


def run_standard_suite(max_coords=None, report=None):
    """Run every check; returns list of (name, max_rel_error, tolerance)."""
    results = []
    for name, layer, x, mode, tol, base_h in standard_suite():
        res = finite_diff_check(layer, x, mode=mode, base_h=base_h,
                                max_coords=max_coords)
        results.append((name, res.max_rel_error, tol))
        if report is not None:
            report(name, res, tol)
    return results


def run_micro_net_check(seed=11, max_coords=40, base_h=1e-5):
    """End-to-end finite differences through a 2-block net (subsampled).

    Composed nets need a smaller step than single ops: an h of 1e-3 on a
    weight behind a batch norm shifts whole standardized channels far
    enough to cross downstream relu kinks, leaving the smooth
    neighborhood the comparison assumes.  1e-5 keeps float64 central
    differences at ~1e-10 truncation while staying inside it.
    """
    net = micro_net(seed=seed)
    rng = np.random.default_rng(seed + 1)
    # batch of 4: with 2 instances the attention subnet's internal batch
    # norm pins pre-activations at +-1 and its fc gradients degenerate to
    # eps scale, below what central differences can resolve
    x = rng.standard_normal((4, 3, 8, 8))
    wrapped = _LogitsOnFlat(net, x.shape)
    return finite_diff_check(wrapped, x.reshape(-1), mode="train",
                             seed=seed + 2, base_h=base_h,
                             max_coords=max_coords)
