"""SGD with momentum and weight decay, cosine schedule with linear
warm-up, cross-entropy, and the epoch loop with metrics capture."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"need 0 <= warmup ({self.warmup_epochs}) < total "
                f"({self.total_epochs})")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    @property
    def total_steps(self):
        return self.total_epochs * self.steps_per_epoch


def lr_at(sched, step):
    """Linear ramp over the warm-up span, then half-cosine decay to ~0."""
    if not 0 <= step < sched.total_steps:
        raise ConfigError(f"step {step} outside [0, {sched.total_steps})")
    warm = sched.warmup_epochs * sched.steps_per_epoch
    if step < warm:
        return sched.base_lr * (step + 1) / warm
    progress = (step - warm) / (sched.total_steps - warm)
    return 0.5 * sched.base_lr * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Momentum SGD: buf <- momentum*buf + (grad + wd*param); param -= lr*buf.

    Frozen (non-trainable) parameters are skipped entirely and hold no
    momentum buffers.  ``decay_norm_params=False`` exempts normalization
    affine/mixture parameters from weight decay.
    """

    def __init__(self, named_params, momentum=0.9, weight_decay=1e-4,
                 decay_norm_params=True):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_norm_params = decay_norm_params
        self.buffers = {}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr):
        for name, p in self.params:
            if not p.trainable:
                self.buffers.pop(name, None)
                continue
            g = p.grad
            if self.weight_decay and (self.decay_norm_params or not p.norm_param):
                g = g + self.weight_decay * p.value
            buf = self.buffers.get(name)
            if buf is None:
                buf = np.zeros_like(p.value)
                self.buffers[name] = buf
            buf *= self.momentum
            buf += g
            p.value -= lr * buf


def cross_entropy(logits, labels):
    """Mean negative log-softmax at the labels; returns (loss, dlogits)."""
    n, num_classes = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigError(f"labels outside [0, {num_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


def top1_accuracy(logits, labels):
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def augment_batch(rng, images, pad=4):
    """Random crop (zero pad then shift) and horizontal flip per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 0.1
    warmup_epochs: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_norm_params: bool = True
    augment: bool = True
    seed: int = 1
    finetune: bool = False


def evaluate(net, x, y, batch_size=128):
    """Eval-mode loss and top-1 over a dataset."""
    n = x.shape[0]
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        logits = net.forward(xb, "eval")
        loss, _ = cross_entropy(logits, yb)
        total_loss += loss * xb.shape[0]
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total_loss / n, correct / n


def train_loop(cfg, net, train_x, train_y, val_x, val_y, on_epoch=None):
    """Run the full schedule; returns per-epoch metric rows.

    Each row is a dict with epoch, lr, train_loss, train_top1, val_loss,
    val_top1.  Aborts with NumericError naming the first non-finite layer
    if the loss diverges.
    """
    rng = np.random.default_rng(cfg.seed)
    n = train_x.shape[0]
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    sched = Schedule(cfg.base_lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch)
    if cfg.finetune:
        net.freeze_attentive_for_finetune()
    opt = SGD(net.named_params(), momentum=cfg.momentum,
              weight_decay=cfg.weight_decay,
              decay_norm_params=cfg.decay_norm_params)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        lr_epoch = lr_at(sched, step)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = train_x[idx]
            yb = train_y[idx]
            if cfg.augment:
                xb = augment_batch(rng, xb)
            logits = net.forward(xb, "train")
            loss, dlogits = cross_entropy(logits, yb)
            if not math.isfinite(loss):
                bad = net.first_nonfinite_layer(xb, "train")
                raise NumericError(
                    f"non-finite loss at epoch {epoch}; first non-finite "
                    f"activation in layer {bad!r}")
            loss_sum += loss * xb.shape[0]
            correct += int((logits.argmax(axis=1) == yb).sum())
            opt.zero_grad()
            net.backward(dlogits)
            opt.step(lr_at(sched, step))
            step += 1
        val_loss, val_top1 = evaluate(net, val_x, val_y,
                                      batch_size=cfg.batch_size)
        row = {
            "epoch": epoch,
            "lr": lr_epoch,
            "train_loss": loss_sum / n,
            "train_top1": correct / n,
            "val_loss": val_loss,
            "val_top1": val_top1,
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history
