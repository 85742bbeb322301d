"""Channel summarizers, gating activations, squeeze-excite, and the
attention subnetwork that produces per-instance mixture weights.

Summaries are computed per instance over the spatial extent of the *raw*
(un-standardized) feature map.  The attention subnetwork maps them through
a single fully-connected layer to K outputs, optionally batch-normalizes
the pre-activations across the mini-batch, and squashes with one of four
activations.
"""

import numpy as np

from .errors import ConfigError
from .normalize import DEFAULT_EPS, DEFAULT_MOMENTUM, RunningStats
from .ops import Layer, Linear, Param

SUMMARIZERS = ("mean", "meanstd", "rsd")
ACTIVATIONS = ("relu", "sigmoid", "softmax", "hsigmoid")


def hsigmoid(a):
    """Hard sigmoid: min(max(a + 3, 0), 6) / 6, piecewise linear in [0, 1]."""
    return np.clip(a + 3.0, 0.0, 6.0) / 6.0


def hsigmoid_grad(a):
    """1/6 strictly inside (-3, 3); 0 outside and at the clamp boundaries."""
    return ((a > -3.0) & (a < 3.0)) / np.asarray(6.0, dtype=a.dtype)


def sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def softmax_rows(z):
    """Row-wise softmax, stabilized by max subtraction."""
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def apply_activation(kind, z):
    if kind == "relu":
        return z * (z > 0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softmax":
        return softmax_rows(z)
    if kind == "hsigmoid":
        return hsigmoid(z)
    raise ConfigError(f"unknown activation {kind!r}")


def activation_backward(kind, z, lam, dlam):
    if kind == "relu":
        return dlam * (z > 0)
    if kind == "sigmoid":
        return dlam * lam * (1.0 - lam)
    if kind == "softmax":
        return lam * (dlam - (dlam * lam).sum(axis=1, keepdims=True))
    if kind == "hsigmoid":
        return dlam * hsigmoid_grad(z)
    raise ConfigError(f"unknown activation {kind!r}")


def channel_summary(x, kind, eps=DEFAULT_EPS):
    """Per-instance channel summaries over (H, W) of the raw input.

    mean    -> (N, C) channel means
    meanstd -> (N, 2C): all means, then all population stds
    rsd     -> (N, C) reversed relative standard deviation mu / (sigma + eps)

    The std carries no eps; eps only stabilizes the rsd denominator.
    """
    mu = x.mean(axis=(2, 3))
    if kind == "mean":
        return mu
    sigma = np.sqrt(x.var(axis=(2, 3)))
    if kind == "meanstd":
        return np.concatenate([mu, sigma], axis=1)
    if kind == "rsd":
        return mu / (sigma + eps)
    raise ConfigError(f"unknown summarizer {kind!r}")


def summary_width(kind, channels):
    return 2 * channels if kind == "meanstd" else channels


class _Summarizer:
    """channel_summary with a cached backward pass."""

    def __init__(self, kind, eps=DEFAULT_EPS):
        if kind not in SUMMARIZERS:
            raise ConfigError(f"unknown summarizer {kind!r}")
        self.kind = kind
        self.eps = eps
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=(2, 3))
        sigma = None
        if self.kind != "mean":
            sigma = np.sqrt(x.var(axis=(2, 3)))
        self._cache = (x, mu, sigma)
        if self.kind == "mean":
            return mu
        if self.kind == "meanstd":
            return np.concatenate([mu, sigma], axis=1)
        return mu / (sigma + self.eps)

    def backward(self, ds):
        x, mu, sigma = self._cache
        n, c, h, w = x.shape
        area = h * w
        if self.kind == "mean":
            dmu, dsig = ds, None
        elif self.kind == "meanstd":
            dmu, dsig = ds[:, :c], ds[:, c:]
        else:
            denom = sigma + self.eps
            dmu = ds / denom
            dsig = -ds * mu / (denom * denom)
        dx = np.broadcast_to((dmu / area)[:, :, None, None], x.shape).copy()
        if dsig is not None:
            # d sigma / d x_i = (x_i - mu) / (area * sigma); 0 when sigma == 0
            # (constant channel), a fixed subgradient convention.
            scale = np.where(sigma > 0.0, dsig / (area * np.where(sigma > 0, sigma, 1.0)), 0.0)
            dx += scale[:, :, None, None] * (x - mu[:, :, None, None])
        return dx


class SqueezeExcite(Layer):
    """Channel gate sigmoid(fc2(relu(fc1(avgpool(x))))) scaling its input.

    ``hidden`` defaults to channels // r; block builders pass the width
    derived from the enclosing block's output channels instead so the gate
    keeps the same capacity wherever it is placed.
    """

    def __init__(self, channels, r=16, hidden=None, rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        if hidden is None:
            hidden = channels // r
        if hidden < 1:
            raise ConfigError(f"reduction r={r} leaves no hidden units "
                              f"for {channels} channels")
        self.channels = channels
        self.fc1 = Linear(channels, hidden, bias=True, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, bias=True, rng=rng, dtype=dtype)
        self._cache = None

    def children(self):
        return [("fc1", self.fc1), ("fc2", self.fc2)]

    def forward(self, x, mode="train"):
        pooled = x.mean(axis=(2, 3))
        v = self.fc1.forward(pooled, mode)
        v_act = v * (v > 0)
        lam = sigmoid(self.fc2.forward(v_act, mode))
        self._cache = (x, v, lam)
        return lam[:, :, None, None] * x

    def backward(self, dout):
        x, v, lam = self._cache
        n, c, h, w = x.shape
        dlam = (dout * x).sum(axis=(2, 3))
        dx = dout * lam[:, :, None, None]
        dz2 = dlam * lam * (1.0 - lam)
        dv = self.fc2.backward(dz2) * (v > 0)
        dpooled = self.fc1.backward(dv)
        dx += (dpooled / (h * w))[:, :, None, None]
        return dx

    def gate(self):
        """Last computed per-instance channel weights (N, C)."""
        return self._cache[2]


class AttentionNet(Layer):
    """Maps a raw feature map to per-instance mixture weights (N, K).

    choice 1: Act(fc(summary(x)) + bias)
    choice 2: Act(BN(fc(summary(x)))), the BN normalizing each of the K
              pre-activations across the mini-batch (own running stats,
              bias-free fc since the BN shift absorbs it).
    """

    def __init__(self, channels, k, summarizer="rsd", choice=2,
                 activation="hsigmoid", eps=DEFAULT_EPS,
                 momentum=DEFAULT_MOMENTUM, rng=None, dtype=np.float32):
        if choice not in (1, 2):
            raise ConfigError(f"choice must be 1 or 2, got {choice}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.channels = channels
        self.k = k
        self.choice = choice
        self.activation = activation
        self.eps = eps
        self.summarizer = _Summarizer(summarizer, eps)
        d_in = summary_width(summarizer, channels)
        bound = np.sqrt(6.0 / d_in)
        self.fc_weight = Param(rng.uniform(-bound, bound, (d_in, k)).astype(dtype))
        if choice == 1:
            self.fc_bias = Param(np.zeros(k, dtype=dtype))
            self.bn_gamma = None
            self.bn_beta = None
            self.running = None
        else:
            self.fc_bias = None
            self.bn_gamma = Param(np.ones(k, dtype=dtype), norm_param=True)
            self.bn_beta = Param(np.zeros(k, dtype=dtype), norm_param=True)
            self.running = RunningStats(k, momentum, dtype)
        self._cache = None

    def params(self):
        out = [("fc_weight", self.fc_weight)]
        if self.fc_bias is not None:
            out.append(("fc_bias", self.fc_bias))
        if self.bn_gamma is not None:
            out.append(("bn_gamma", self.bn_gamma))
            out.append(("bn_beta", self.bn_beta))
        return out

    def buffers(self):
        return self.running.buffers("bn_") if self.running is not None else []

    def forward(self, x, mode="train"):
        s = self.summarizer.forward(x)
        z = s @ self.fc_weight.value
        if self.choice == 1:
            z = z + self.fc_bias.value
            zhat, bn_cache = None, None
            pre = z
        else:
            if mode == "train":
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                self.running.update(mu, var)
            else:
                self.running.require_initialized()
                mu = self.running.mean.astype(z.dtype, copy=False)
                var = self.running.var.astype(z.dtype, copy=False)
            sig = np.sqrt(var + self.eps)
            zhat = (z - mu) / sig
            bn_cache = (sig, mode)
            pre = self.bn_gamma.value * zhat + self.bn_beta.value
        lam = apply_activation(self.activation, pre)
        self._cache = (s, zhat, bn_cache, pre, lam)
        return lam

    def backward(self, dlam):
        s, zhat, bn_cache, pre, lam = self._cache
        dpre = activation_backward(self.activation, pre, lam, dlam)
        if self.choice == 1:
            self.fc_bias.grad += dpre.sum(axis=0)
            dz = dpre
        else:
            sig, mode = bn_cache
            self.bn_gamma.grad += (dpre * zhat).sum(axis=0)
            self.bn_beta.grad += dpre.sum(axis=0)
            dzhat = dpre * self.bn_gamma.value
            if mode == "train":
                dz = (dzhat - dzhat.mean(axis=0)
                      - zhat * (dzhat * zhat).mean(axis=0)) / sig
            else:
                dz = dzhat / sig
        self.fc_weight.grad += s.T @ dz
        ds = dz @ self.fc_weight.value.T
        return self.summarizer.backward(ds)

    def preactivations(self):
        """Pre-activation values of the last forward (for smoothness checks)."""
        return self._cache[3]
