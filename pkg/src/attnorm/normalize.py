"""Block-wise standardization and the vanilla normalization layers.

A "block" is a slice of the (N, C, H, W) tensor over which moments are
pooled: batch blocks pool one channel across the whole mini-batch (one
block per channel), group blocks pool a channel group within a single
instance (N * groups blocks).  Standardization subtracts the block mean
and divides by sqrt(population variance + eps); the channel-wise affine
transform then re-scales and re-shifts per channel.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .ops import Layer, Param

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass(frozen=True)
class BlockScheme:
    """Partition of the tensor into moment-pooling blocks."""

    kind: str  # "batch" or "group"
    groups: int = 0

    def validate(self, shape):
        n, c, h, w = shape
        if self.kind == "group":
            if self.groups < 1 or c % self.groups != 0:
                raise ConfigError(
                    f"groups={self.groups} does not divide channels={c}"
                )
        elif self.kind != "batch":
            raise ConfigError(f"unknown block scheme {self.kind!r}")

    def block_size(self, shape):
        n, c, h, w = shape
        if self.kind == "batch":
            return n * h * w
        return (c // self.groups) * h * w


def batch_blocks():
    return BlockScheme("batch")


def group_blocks(groups):
    return BlockScheme("group", groups)


def resolve_groups(channels, groups=None):
    """Default grouping: 32, falling back to one group per channel when
    the tensor is narrower than 32 channels."""
    if groups is None:
        groups = 32 if channels >= 32 else channels
    if channels % groups != 0:
        raise ConfigError(f"groups={groups} does not divide channels={channels}")
    return groups


@dataclass
class MomentStats:
    """Per-block moments, broadcast to (.., C, 1, 1) against the input.

    ``sigma`` is sqrt(var + eps) and therefore strictly positive.
    ``block_mu`` / ``block_var`` hold the raw per-block vectors (length C
    for batch blocks, N*groups for group blocks).
    """

    mu: np.ndarray
    sigma: np.ndarray
    block_mu: np.ndarray
    block_var: np.ndarray
    m: int
    eps: float
    scheme: BlockScheme


def block_mean_like(t, scheme):
    """Mean over each block, broadcast back over the block's positions."""
    if scheme.kind == "batch":
        return t.mean(axis=(0, 2, 3), keepdims=True)
    n, c, h, w = t.shape
    g = scheme.groups
    m = t.reshape(n, g, -1).mean(axis=2)
    return np.repeat(m, c // g, axis=1).reshape(n, c, 1, 1)


def compute_block_moments(x, scheme, eps=DEFAULT_EPS):
    """Population mean / sqrt(var + eps) over each block of the partition."""
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    scheme.validate(x.shape)
    n, c, h, w = x.shape
    if scheme.kind == "batch":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        mu_b = mu.reshape(1, c, 1, 1)
        sig_b = np.sqrt(var + eps).reshape(1, c, 1, 1)
        return MomentStats(mu_b, sig_b, mu, var, scheme.block_size(x.shape),
                           eps, scheme)
    g = scheme.groups
    xg = x.reshape(n, g, -1)
    mu = xg.mean(axis=2)
    var = xg.var(axis=2)
    reps = c // g
    mu_b = np.repeat(mu, reps, axis=1).reshape(n, c, 1, 1)
    sig_b = np.repeat(np.sqrt(var + eps), reps, axis=1).reshape(n, c, 1, 1)
    return MomentStats(mu_b, sig_b, mu.reshape(-1), var.reshape(-1),
                       scheme.block_size(x.shape), eps, scheme)


def standardize(x, stats):
    """(x - mu) / sigma per block."""
    xhat = x - stats.mu
    xhat /= stats.sigma
    return xhat


def standardize_backward(dxhat, xhat, stats):
    """Gradient through standardization including the moment dependence."""
    scheme = stats.scheme
    dx = dxhat - block_mean_like(dxhat, scheme)
    dx -= xhat * block_mean_like(dxhat * xhat, scheme)
    dx /= stats.sigma
    return dx


def affine(xhat, gamma, beta):
    """Channel-wise re-scale and re-shift."""
    c = xhat.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"affine parameters must have length {c}")
    out = gamma.reshape(1, c, 1, 1) * xhat
    out += beta.reshape(1, c, 1, 1)
    return out


class RunningStats:
    """Exponential moving average of batch mean and population variance."""

    def __init__(self, channels, momentum=DEFAULT_MOMENTUM, dtype=np.float32):
        if not 0.0 < momentum <= 1.0:
            raise ConfigError(f"momentum must lie in (0, 1], got {momentum}")
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self._steps = np.zeros(1, dtype=np.int64)

    @property
    def count(self):
        return int(self._steps[0])

    def update(self, batch_mean, batch_var):
        m = self.momentum
        self.mean *= 1.0 - m
        self.mean += m * batch_mean
        self.var *= 1.0 - m
        self.var += m * batch_var
        self._steps[0] += 1

    def require_initialized(self):
        if self.count == 0:
            raise NumericError("uninitialized running statistics: "
                               "eval mode before any train-mode update")

    def buffers(self, prefix=""):
        return [(prefix + "running_mean", self.mean),
                (prefix + "running_var", self.var),
                (prefix + "running_steps", self._steps)]


class BatchNorm2d(Layer):
    """Batch normalization over (N, C, H, W).

    Train mode standardizes with batch moments and folds them into the
    running averages; eval mode standardizes with the running mean and
    sqrt(running var + eps).  The affine transform applies in both modes.
    """

    def __init__(self, channels, eps=DEFAULT_EPS, momentum=DEFAULT_MOMENTUM,
                 dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.gamma = Param(np.ones(channels, dtype=dtype), norm_param=True)
        self.beta = Param(np.zeros(channels, dtype=dtype), norm_param=True)
        self.running = RunningStats(channels, momentum, dtype)
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return self.running.buffers()

    def forward(self, x, mode="train"):
        c = self.channels
        if mode == "train":
            stats = compute_block_moments(x, batch_blocks(), self.eps)
            self.running.update(stats.block_mu, stats.block_var)
        else:
            self.running.require_initialized()
            mu = self.running.mean.astype(x.dtype).reshape(1, c, 1, 1)
            sigma = np.sqrt(self.running.var.astype(x.dtype) + self.eps)
            stats = MomentStats(mu, sigma.reshape(1, c, 1, 1), self.running.mean,
                                self.running.var, 0, self.eps, batch_blocks())
        xhat = standardize(x, stats)
        self._cache = (xhat, stats, mode)
        return affine(xhat, self.gamma.value, self.beta.value)

    def backward(self, dout):
        # the per-channel sums are simultaneously the affine gradients and
        # the block means the standardization backward needs
        xhat, stats, mode = self._cache
        c = self.channels
        s2 = (dout * xhat).sum(axis=(0, 2, 3))
        s1 = dout.sum(axis=(0, 2, 3))
        self.gamma.grad += s2
        self.beta.grad += s1
        a = self.gamma.value / stats.sigma.reshape(c)
        if mode != "train":
            return dout * a.reshape(1, c, 1, 1)
        dx = dout * a.reshape(1, c, 1, 1)
        dx -= xhat * (a * s2 / stats.m).reshape(1, c, 1, 1)
        dx -= (a * s1 / stats.m).reshape(1, c, 1, 1)
        return dx


class GroupNorm2d(Layer):
    """Group normalization: per-instance, channel-group-wise moments.

    Identical computation in train and eval; no running statistics.
    """

    def __init__(self, channels, groups=None, eps=DEFAULT_EPS, dtype=np.float32):
        self.channels = channels
        self.groups = resolve_groups(channels, groups)
        self.eps = eps
        self.gamma = Param(np.ones(channels, dtype=dtype), norm_param=True)
        self.beta = Param(np.zeros(channels, dtype=dtype), norm_param=True)
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x, mode="train"):
        stats = compute_block_moments(x, group_blocks(self.groups), self.eps)
        xhat = standardize(x, stats)
        self._cache = (xhat, stats)
        return affine(xhat, self.gamma.value, self.beta.value)

    def backward(self, dout):
        xhat, stats = self._cache
        n, c = dout.shape[:2]
        g, cg = self.groups, self.channels // self.groups
        sc2 = (dout * xhat).sum(axis=(2, 3))
        sc1 = dout.sum(axis=(2, 3))
        self.gamma.grad += sc2.sum(axis=0)
        self.beta.grad += sc1.sum(axis=0)
        gam = self.gamma.value
        # per-block means of the standardized-path cotangent, expressed
        # through the per-channel sums already in hand
        b1 = (sc1 * gam).reshape(n, g, cg).sum(axis=2) / stats.m
        b2 = (sc2 * gam).reshape(n, g, cg).sum(axis=2) / stats.m
        dx = dout * gam.reshape(1, c, 1, 1)
        dx -= xhat * np.repeat(b2, cg, axis=1).reshape(n, c, 1, 1)
        dx -= np.repeat(b1, cg, axis=1).reshape(n, c, 1, 1)
        dx /= stats.sigma
        return dx
