"""Attentive normalization: standardization backbone plus an attention-
weighted mixture of K channel-wise affine transforms.

The layer keeps the backbone's block-wise standardization unchanged and
replaces the single (gamma, beta) pair with K learned pairs.  A small
attention subnetwork reads per-channel summaries of the *raw* input and
emits per-instance weights lambda (N, K); the affine actually applied at
instance n and channel c is

    gamma_eff[n, c] = sum_k lambda[n, k] * gamma[k, c]
    beta_eff[n, c]  = sum_k lambda[n, k] * beta[k, c]

so the re-calibration stays adaptive in eval mode, where the weights are
still computed from the incoming feature map.
"""

import numpy as np

from .attention import AttentionNet
from .errors import ConfigError, ShapeError
from .normalize import (DEFAULT_EPS, DEFAULT_MOMENTUM, MomentStats, RunningStats,
                        batch_blocks, compute_block_moments, group_blocks,
                        resolve_groups, standardize, standardize_backward)
from .ops import Layer, Param


def effective_affine(lam, gamma, beta):
    """Mix the K affine components into per-instance (N, C) scale/shift."""
    if lam.ndim != 2 or gamma.ndim != 2 or lam.shape[1] != gamma.shape[0]:
        raise ShapeError(
            f"weights {lam.shape} incompatible with mixture {gamma.shape}"
        )
    return lam @ gamma, lam @ beta


class AttentiveNorm2d(Layer):
    """Feature normalization with an attention-weighted affine mixture.

    backbone "bn" pools batch blocks in train mode and running statistics
    in eval mode; backbone "gn" pools per-instance channel groups in both
    modes.  ``freeze_for_finetune`` pins the standardization statistics and
    the mixture while leaving the attention subnetwork trainable.
    """

    def __init__(self, channels, k, backbone="bn", groups=None,
                 summarizer="rsd", choice=2, activation="hsigmoid",
                 eps=DEFAULT_EPS, momentum=DEFAULT_MOMENTUM,
                 seed=None, rng=None, dtype=np.float32,
                 freeze_attn_bn_on_finetune=False):
        if channels < 1 or k < 1:
            raise ConfigError(f"need channels >= 1 and k >= 1, got {channels}, {k}")
        if backbone not in ("bn", "gn"):
            raise ConfigError(f"backbone must be 'bn' or 'gn', got {backbone!r}")
        if rng is None:
            rng = np.random.default_rng(0 if seed is None else seed)
        self.channels = channels
        self.k = k
        self.backbone = backbone
        self.eps = eps
        gamma = 1.0 + rng.standard_normal((k, channels)) * 0.1
        beta = rng.standard_normal((k, channels)) * 0.1
        self.mixture_gamma = Param(gamma.astype(dtype), norm_param=True)
        self.mixture_beta = Param(beta.astype(dtype), norm_param=True)
        self.attnet = AttentionNet(channels, k, summarizer=summarizer,
                                   choice=choice, activation=activation,
                                   eps=eps, momentum=momentum, rng=rng,
                                   dtype=dtype)
        if backbone == "bn":
            self.groups = None
            self.running = RunningStats(channels, momentum, dtype)
        else:
            self.groups = resolve_groups(channels, groups)
            self.running = None
        self.frozen_standardization = False
        self.frozen_mixture = False
        self.freeze_attn_bn_on_finetune = freeze_attn_bn_on_finetune
        self._cache = None

    def params(self):
        return [("mixture_gamma", self.mixture_gamma),
                ("mixture_beta", self.mixture_beta)]

    def children(self):
        return [("attnet", self.attnet)]

    def buffers(self):
        return self.running.buffers() if self.running is not None else []

    def freeze_for_finetune(self):
        """Pin standardization statistics and the affine mixture; keep the
        attention subnetwork trainable."""
        if self.backbone == "bn":
            self.running.require_initialized()
        self.frozen_standardization = True
        self.frozen_mixture = True
        self.mixture_gamma.trainable = False
        self.mixture_beta.trainable = False
        return self

    def _standardize_stats(self, x, mode):
        c = self.channels
        if self.backbone == "gn":
            return compute_block_moments(x, group_blocks(self.groups), self.eps)
        if mode == "train" and not self.frozen_standardization:
            stats = compute_block_moments(x, batch_blocks(), self.eps)
            self.running.update(stats.block_mu, stats.block_var)
            return stats
        self.running.require_initialized()
        mu = self.running.mean.astype(x.dtype, copy=False).reshape(1, c, 1, 1)
        sigma = np.sqrt(self.running.var.astype(x.dtype, copy=False) + self.eps)
        return MomentStats(mu, sigma.reshape(1, c, 1, 1), self.running.mean,
                           self.running.var, 0, self.eps, batch_blocks())

    def forward(self, x, mode="train"):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (N,{self.channels},H,W), got {x.shape}")
        attn_mode = mode
        if self.frozen_standardization and self.freeze_attn_bn_on_finetune:
            attn_mode = "eval"
        lam = self.attnet.forward(x, attn_mode)
        stats = self._standardize_stats(x, mode)
        xhat = standardize(x, stats)
        gamma_eff, beta_eff = effective_affine(
            lam, self.mixture_gamma.value, self.mixture_beta.value)
        batch_stats = (self.backbone == "gn"
                       or (mode == "train" and not self.frozen_standardization))
        self._cache = (lam, xhat, stats, gamma_eff, batch_stats)
        out = gamma_eff[:, :, None, None] * xhat
        out += beta_eff[:, :, None, None]
        return out

    def backward(self, dout):
        lam, xhat, stats, gamma_eff, batch_stats = self._cache
        n, c = dout.shape[:2]
        dgamma_eff = (dout * xhat).sum(axis=(2, 3))
        dbeta_eff = dout.sum(axis=(2, 3))
        if not self.frozen_mixture:
            self.mixture_gamma.grad += lam.T @ dgamma_eff
            self.mixture_beta.grad += lam.T @ dbeta_eff
        dlam = (dgamma_eff @ self.mixture_gamma.value.T
                + dbeta_eff @ self.mixture_beta.value.T)
        dx = dout * gamma_eff[:, :, None, None]
        if batch_stats:
            # block means of the standardized-path cotangent from the
            # per-instance sums already computed
            ge1 = gamma_eff * dbeta_eff
            ge2 = gamma_eff * dgamma_eff
            if self.backbone == "bn":
                b1 = (ge1.sum(axis=0) / stats.m).reshape(1, c, 1, 1)
                b2 = (ge2.sum(axis=0) / stats.m).reshape(1, c, 1, 1)
            else:
                g, cg = self.groups, c // self.groups
                b1 = np.repeat(ge1.reshape(n, g, cg).sum(axis=2) / stats.m,
                               cg, axis=1).reshape(n, c, 1, 1)
                b2 = np.repeat(ge2.reshape(n, g, cg).sum(axis=2) / stats.m,
                               cg, axis=1).reshape(n, c, 1, 1)
            dx -= xhat * b2
            dx -= b1
        dx /= stats.sigma
        return dx + self.attnet.backward(dlam)

    def last_weights(self):
        """Mixture weights lambda (N, K) of the most recent forward."""
        return self._cache[0]
