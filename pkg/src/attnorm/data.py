"""Synthetic blob dataset and IDX binary ingestion.

The blob generator produces class-conditional 3x32x32 images: each class
owns a mean color, an oriented sinusoidal grating (class-specific
frequency and orientation, random phase per sample) and i.i.d. Gaussian
pixel noise.  Classes are balanced exactly and the split is 80/20 per
class, so both splits have exactly uniform label histograms.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

IDX_IMAGE_MAGIC = 0x00000803  # unsigned bytes, rank 3
IDX_LABEL_MAGIC = 0x00000801  # unsigned bytes, rank 1


@dataclass(frozen=True)
class BlobSpec:
    num_classes: int = 4
    samples_per_class: int = 1250
    image_size: int = 32
    channels: int = 3
    noise: float = 0.12
    seed: int = 7

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.samples_per_class < 5:
            raise ConfigError("need at least 5 samples per class")


def _class_colors(rng, num_classes, channels):
    """Mean colors kept pairwise well separated (deterministic rejection)."""
    colors = rng.uniform(0.2, 0.8, size=(num_classes, channels))
    for _ in range(200):
        d = np.linalg.norm(colors[:, None] - colors[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        bad = np.unravel_index(d.argmin(), d.shape)
        if d[bad] >= 0.35:
            break
        colors[bad[0]] = rng.uniform(0.2, 0.8, size=channels)
    return colors


def gen_blobs(spec: BlobSpec):
    """Returns (train_x, train_y, val_x, val_y); images float32 in [0, 1],
    NCHW; labels int64.  Deterministic from the seed."""
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    c = spec.channels
    colors = _class_colors(rng, spec.num_classes, c)
    grid = np.arange(s, dtype=np.float64) / s
    yy, xx = np.meshgrid(grid, grid, indexing="ij")

    train_parts, val_parts = [], []
    n_val = max(1, spec.samples_per_class // 5)  # 80/20 per class
    n_train = spec.samples_per_class - n_val
    for cls in range(spec.num_classes):
        freq = 1.5 + cls
        theta = np.pi * (cls + 0.35) / spec.num_classes
        coord = np.cos(theta) * xx + np.sin(theta) * yy
        weights = rng.uniform(-1.0, 1.0, size=c)
        weights /= max(np.linalg.norm(weights), 1e-9)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=spec.samples_per_class)
        grating = np.sin(2.0 * np.pi * freq * coord[None] + phase[:, None, None])
        imgs = (colors[cls][None, :, None, None]
                + 0.22 * weights[None, :, None, None] * grating[:, None])
        imgs = imgs + spec.noise * rng.standard_normal(imgs.shape)
        imgs = np.clip(imgs, 0.0, 1.0).astype(np.float32)
        train_parts.append(imgs[:n_train])
        val_parts.append(imgs[n_train:])

    def assemble(parts, per_class):
        x = np.concatenate(parts, axis=0)
        y = np.repeat(np.arange(spec.num_classes, dtype=np.int64), per_class)
        order = rng.permutation(x.shape[0])
        return np.ascontiguousarray(x[order]), y[order]

    train_x, train_y = assemble(train_parts, n_train)
    val_x, val_y = assemble(val_parts, n_val)
    return train_x, train_y, val_x, val_y


def nearest_class_mean_accuracy(train_x, train_y, val_x, val_y):
    """Linear-ish probe: classify by nearest class centroid in pixel space."""
    classes = np.unique(train_y)
    means = np.stack([train_x[train_y == c].reshape(-1, train_x[0].size).mean(axis=0)
                      for c in classes])
    flat = val_x.reshape(val_x.shape[0], -1)
    d = ((flat[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    pred = classes[d.argmin(axis=1)]
    return float((pred == val_y).mean())


def read_idx(path):
    """Parse one IDX file (big-endian header, u8 payload) into an ndarray."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ConfigError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC):
        raise ConfigError(
            f"{path}: bad magic bytes {raw[:4].hex()} "
            f"(expected {IDX_IMAGE_MAGIC:08x} or {IDX_LABEL_MAGIC:08x})")
    rank = magic & 0xFF
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise ConfigError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{rank}I", raw[4:header_end])
    expected = int(np.prod(dims))
    payload = raw[header_end:]
    if len(payload) != expected:
        raise ConfigError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"dims {dims} require {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    """Write a u8 array as an IDX file (rank 3 -> images, rank 1 -> labels)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGE_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABEL_MAGIC
    else:
        raise ConfigError(f"IDX writer supports rank 1 or 3, got {array.ndim}")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx_dataset(images_path, labels_path, channels=3):
    """IDX image/label pair -> (x, y) with x float32 in [0, 1], NCHW;
    grayscale images replicate to ``channels``."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise ConfigError(f"{images_path}: expected rank-3 image file")
    if labels.ndim != 1:
        raise ConfigError(f"{labels_path}: expected rank-1 label file")
    if images.shape[0] != labels.shape[0]:
        raise ConfigError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels")
    x = images.astype(np.float32) / 255.0
    x = np.repeat(x[:, None, :, :], channels, axis=1)
    return x, labels.astype(np.int64)
