"""Flat ``section.key = value`` run configuration.

Every run is fully reproducible from (config, seed): the parser fills
defaults for omitted keys and rejects unknown ones, and serialization is
canonical (sorted keys, normalized value spelling) so parse -> serialize
-> parse is a fixed point.
"""

import numpy as np

from .errors import ConfigError

_NORMS = ("bn", "gn", "se-bn2", "se-bn3", "se-all", "an-bn2", "an-bn3", "an-all")

# key -> (type, default, allowed values or None)
SCHEMA = {
    "data.kind": ("str", "blobs", ("blobs", "idx")),
    "data.images": ("str", "", None),
    "data.labels": ("str", "", None),
    "data.num_classes": ("int", 4, None),
    "data.samples_per_class": ("int", 1250, None),
    "data.image_size": ("int", 32, None),
    "data.channels": ("int", 3, None),
    "data.noise": ("float", 0.12, None),
    "data.seed": ("int", 7, None),
    "net.arch": ("str", "toy", ("toy", "resnet34", "resnet50", "resnet101")),
    "net.norm": ("str", "bn", _NORMS),
    "net.groups": ("int", 0, None),  # 0 -> per-width default
    "net.se_r": ("int", 16, None),
    "net.zero_gamma": ("bool", False, None),
    "an.k": ("ints", (), None),  # empty -> architecture default
    "an.backbone": ("str", "bn", ("bn", "gn")),
    "an.summarizer": ("str", "rsd", ("mean", "meanstd", "rsd")),
    "an.choice": ("int", 2, (1, 2)),
    "an.activation": ("str", "hsigmoid",
                      ("relu", "sigmoid", "softmax", "hsigmoid")),
    "an.eps": ("float", 1e-5, None),
    "an.freeze_attn_bn": ("bool", False, None),
    "train.epochs": ("int", 30, None),
    "train.batch_size": ("int", 128, None),
    "train.base_lr": ("float", 0.1, None),
    "train.warmup_epochs": ("int", 2, None),
    "train.momentum": ("float", 0.9, None),
    "train.weight_decay": ("float", 1e-4, None),
    "train.decay_norm_params": ("bool", True, None),
    "train.augment": ("bool", True, None),
    "train.seed": ("int", 1, None),
    "train.dtype": ("str", "f32", ("f32", "f64")),
    "train.finetune": ("bool", False, None),
    "train.init_checkpoint": ("str", "", None),
}

# Recognized but unsupported: fail loudly instead of silently ignoring.
REJECTED_KEYS = {
    "train.label_smoothing": "label smoothing is out of scope for this harness",
    "train.mixup": "mixup is out of scope for this harness",
}


def _parse_value(key, kind, text):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "ints":
            if not text:
                return ()
            return tuple(int(t) for t in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from exc


def _format_value(kind, value):
    if kind == "bool":
        return "true" if value else "false"
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def default_config():
    return {key: default for key, (_, default, _) in SCHEMA.items()}


def config_from_text(text):
    cfg = default_config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in REJECTED_KEYS:
            raise ConfigError(f"{key}: {REJECTED_KEYS[key]}")
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind, _, allowed = SCHEMA[key]
        parsed = _parse_value(key, kind, value)
        if allowed is not None and parsed not in allowed:
            raise ConfigError(
                f"{key}: {parsed!r} not in allowed values {allowed}")
        cfg[key] = parsed
    return cfg


def config_to_text(cfg):
    lines = []
    for key in sorted(SCHEMA):
        kind, _, _ = SCHEMA[key]
        lines.append(f"{key} = {_format_value(kind, cfg[key])}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return config_from_text(f.read())


def blob_spec_from_config(cfg):
    from .data import BlobSpec

    return BlobSpec(num_classes=cfg["data.num_classes"],
                    samples_per_class=cfg["data.samples_per_class"],
                    image_size=cfg["data.image_size"],
                    channels=cfg["data.channels"],
                    noise=cfg["data.noise"],
                    seed=cfg["data.seed"])


def netspec_from_config(cfg):
    from .networks import parse_norm, resnet_spec, toy_spec

    dtype = np.float64 if cfg["train.dtype"] == "f64" else np.float32
    norm = parse_norm(
        cfg["net.norm"],
        groups=cfg["net.groups"] or None,
        r=cfg["net.se_r"],
        backbone=cfg["an.backbone"],
        summarizer=cfg["an.summarizer"],
        choice=cfg["an.choice"],
        activation=cfg["an.activation"],
        attn_eps=cfg["an.eps"],
        freeze_attn_bn=cfg["an.freeze_attn_bn"],
    )
    k = cfg["an.k"] or None
    if cfg["net.arch"] == "toy":
        return toy_spec(norm=norm, k_per_stage=k,
                        num_classes=cfg["data.num_classes"],
                        zero_gamma=cfg["net.zero_gamma"], dtype=dtype)
    return resnet_spec(cfg["net.arch"], norm=norm, k_per_stage=k,
                       num_classes=cfg["data.num_classes"],
                       zero_gamma=cfg["net.zero_gamma"], dtype=dtype)


def trainconfig_from_config(cfg):
    from .training import TrainConfig

    return TrainConfig(epochs=cfg["train.epochs"],
                       batch_size=cfg["train.batch_size"],
                       base_lr=cfg["train.base_lr"],
                       warmup_epochs=cfg["train.warmup_epochs"],
                       momentum=cfg["train.momentum"],
                       weight_decay=cfg["train.weight_decay"],
                       decay_norm_params=cfg["train.decay_norm_params"],
                       augment=cfg["train.augment"],
                       seed=cfg["train.seed"],
                       finetune=cfg["train.finetune"])
