"""Residual network builders: basic/bottleneck blocks, squeeze-excite and
attentive-norm placement, stage assembly and parameter counting.

Placement follows the convention that attention-style modules act on the
normalization after the last 3x3 convolution of a residual branch: that is
the second norm in both block kinds ("bn2").  Bottlenecks additionally
expose the final norm ("bn3") and an "all" variant covering every branch
norm.  Downsampling shortcuts always use a plain 1x1 conv + vanilla norm.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .attentive import AttentiveNorm2d
from .attention import SqueezeExcite
from .errors import ConfigError, ShapeError
from .normalize import BatchNorm2d, GroupNorm2d
from .ops import Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2d, ReLU

NORM_NAMES = ("bn", "gn", "se-bn2", "se-bn3", "se-all",
              "an-bn2", "an-bn3", "an-all")


@dataclass(frozen=True)
class NormSpec:
    """Which normalization/attention flavor a network's blocks use."""

    kind: str = "bn"          # bn | gn | se | an
    placement: str = "bn2"    # for se/an: bn2 | bn3 | all
    groups: int | None = None  # gn networks and gn-backbone an
    r: int = 16               # se reduction, relative to block output width
    backbone: str = "bn"      # an standardization backbone
    summarizer: str = "rsd"
    choice: int = 2
    activation: str = "hsigmoid"
    attn_eps: float = 1e-5
    freeze_attn_bn: bool = False


def parse_norm(name, **overrides):
    """NormSpec from a CLI-style name such as 'bn', 'gn' or 'an-bn2'."""
    if name not in NORM_NAMES:
        raise ConfigError(f"unknown norm {name!r}, expected one of {NORM_NAMES}")
    if name in ("bn", "gn"):
        return NormSpec(kind=name, **overrides)
    kind, placement = name.split("-")
    return NormSpec(kind=kind, placement=placement, **overrides)


@dataclass(frozen=True)
class StageSpec:
    block: str      # "basic" | "bottleneck"
    width: int      # mid channels of each block
    depth: int
    stride: int


@dataclass(frozen=True)
class NetSpec:
    stem: str                       # "imagenet" (7x7/2 + maxpool) | "cifar" (3x3/1)
    stages: tuple
    num_classes: int
    norm: NormSpec = NormSpec()
    k_per_stage: tuple = ()
    zero_gamma: bool = False
    in_channels: int = 3
    dtype: object = np.float32

    def __post_init__(self):
        if self.norm.kind == "an" and len(self.k_per_stage) != len(self.stages):
            raise ConfigError(
                f"k_per_stage needs {len(self.stages)} entries, "
                f"got {self.k_per_stage}")


def _expansion(block_kind):
    return 4 if block_kind == "bottleneck" else 1


def _positions(block_kind):
    return 3 if block_kind == "bottleneck" else 2


def _selected_positions(norm, block_kind):
    """Branch-norm indices (1-based) an SE/AN placement refers to."""
    last = _positions(block_kind)
    if norm.placement == "all":
        return tuple(range(1, last + 1))
    want = int(norm.placement[2:])
    if want > last:
        raise ConfigError(
            f"placement {norm.placement} invalid for {block_kind} blocks")
    return (want,)


class _ResidualBlock(Layer):
    """Shared machinery for basic and bottleneck blocks.

    Subclasses populate ``self.steps`` as a list of (conv, norm, se, relu)
    stages; the final stage has relu=None (activation happens after the
    shortcut addition).
    """

    def __init__(self, in_channels, mid_channels, stride, norm, k, rng,
                 dtype, zero_gamma):
        self.in_channels = in_channels
        self.out_channels = mid_channels * _expansion(self.kind)
        self.stride = stride
        self.norm_spec = norm
        sel = (_selected_positions(norm, self.kind)
               if norm.kind in ("se", "an") else ())
        self.steps = self._build_branch(in_channels, mid_channels, stride,
                                        norm, sel, k, rng, dtype)
        if stride != 1 or in_channels != self.out_channels:
            self.proj_conv = Conv2d(in_channels, self.out_channels, 1,
                                    stride=stride, pad=0, rng=rng, dtype=dtype)
            self.proj_norm = self._vanilla_norm(self.out_channels, norm, dtype)
        else:
            self.proj_conv = None
            self.proj_norm = None
        self.out_relu = ReLU()
        if zero_gamma:
            last_norm = self.steps[-1][1]
            if isinstance(last_norm, AttentiveNorm2d):
                last_norm.mixture_gamma.value[...] = 0.0
            else:
                last_norm.gamma.value[...] = 0.0
        self._cache = None

    def _vanilla_norm(self, channels, norm, dtype):
        if norm.kind == "gn":
            return GroupNorm2d(channels, norm.groups, dtype=dtype)
        return BatchNorm2d(channels, dtype=dtype)

    def _make_norm(self, channels, position, norm, selected, k, rng, dtype):
        if norm.kind == "an" and position in selected:
            return AttentiveNorm2d(
                channels, k, backbone=norm.backbone, groups=norm.groups,
                summarizer=norm.summarizer, choice=norm.choice,
                activation=norm.activation, eps=norm.attn_eps, rng=rng,
                dtype=dtype,
                freeze_attn_bn_on_finetune=norm.freeze_attn_bn)
        return self._vanilla_norm(channels, norm, dtype)

    def _make_se(self, channels, position, norm, selected, rng, dtype):
        if norm.kind == "se" and position in selected:
            hidden = max(1, self.out_channels // norm.r)
            return SqueezeExcite(channels, r=norm.r, hidden=hidden, rng=rng,
                                 dtype=dtype)
        return None

    def children(self):
        out = []
        for i, (conv, nrm, se, relu) in enumerate(self.steps, start=1):
            out.append((f"conv{i}", conv))
            out.append((f"norm{i}", nrm))
            if se is not None:
                out.append((f"se{i}", se))
        if self.proj_conv is not None:
            out.append(("proj_conv", self.proj_conv))
            out.append(("proj_norm", self.proj_norm))
        return out

    def forward(self, x, mode="train"):
        h = x
        for conv, nrm, se, relu in self.steps:
            h = nrm.forward(conv.forward(h, mode), mode)
            if se is not None:
                h = se.forward(h, mode)
            if relu is not None:
                h = relu.forward(h, mode)
        if self.proj_conv is not None:
            shortcut = self.proj_norm.forward(self.proj_conv.forward(x, mode), mode)
        else:
            shortcut = x
        return self.out_relu.forward(h + shortcut, mode)

    def backward(self, dout):
        d = self.out_relu.backward(dout)
        dbranch = d
        for conv, nrm, se, relu in reversed(self.steps):
            if relu is not None:
                dbranch = relu.backward(dbranch)
            if se is not None:
                dbranch = se.backward(dbranch)
            dbranch = conv.backward(nrm.backward(dbranch))
        if self.proj_conv is not None:
            dshort = self.proj_conv.backward(self.proj_norm.backward(d))
        else:
            dshort = d
        return dbranch + dshort


class BasicBlock(_ResidualBlock):
    """Two 3x3 convolutions; stride on the first."""

    kind = "basic"

    def _build_branch(self, in_ch, mid, stride, norm, sel, k, rng, dtype):
        conv1 = Conv2d(in_ch, mid, 3, stride=stride, pad=1, rng=rng, dtype=dtype)
        conv2 = Conv2d(mid, mid, 3, stride=1, pad=1, rng=rng, dtype=dtype)
        return [
            (conv1, self._make_norm(mid, 1, norm, sel, k, rng, dtype),
             self._make_se(mid, 1, norm, sel, rng, dtype), ReLU()),
            (conv2, self._make_norm(mid, 2, norm, sel, k, rng, dtype),
             self._make_se(mid, 2, norm, sel, rng, dtype), None),
        ]


class Bottleneck(_ResidualBlock):
    """1x1 reduce, 3x3 (strided), 1x1 expand by 4."""

    kind = "bottleneck"

    def _build_branch(self, in_ch, mid, stride, norm, sel, k, rng, dtype):
        out_ch = mid * 4
        conv1 = Conv2d(in_ch, mid, 1, stride=1, pad=0, rng=rng, dtype=dtype)
        conv2 = Conv2d(mid, mid, 3, stride=stride, pad=1, rng=rng, dtype=dtype)
        conv3 = Conv2d(mid, out_ch, 1, stride=1, pad=0, rng=rng, dtype=dtype)
        return [
            (conv1, self._make_norm(mid, 1, norm, sel, k, rng, dtype),
             self._make_se(mid, 1, norm, sel, rng, dtype), ReLU()),
            (conv2, self._make_norm(mid, 2, norm, sel, k, rng, dtype),
             self._make_se(mid, 2, norm, sel, rng, dtype), ReLU()),
            (conv3, self._make_norm(out_ch, 3, norm, sel, k, rng, dtype),
             self._make_se(out_ch, 3, norm, sel, rng, dtype), None),
        ]


_BLOCK_CLASSES = {"basic": BasicBlock, "bottleneck": Bottleneck}


def build_block(kind, in_channels, mid_channels, stride, norm, k=1, rng=None,
                dtype=np.float32, zero_gamma=False):
    if kind not in _BLOCK_CLASSES:
        raise ConfigError(f"unknown block kind {kind!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    return _BLOCK_CLASSES[kind](in_channels, mid_channels, stride, norm, k,
                                rng, dtype, zero_gamma)


class Network(Layer):
    """An ordered chain of named layers; blocks handle their own branching."""

    def __init__(self, named_layers):
        self._layers = list(named_layers)
        names = [n for n, _ in self.named_params()]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter names in network")

    def children(self):
        return self._layers

    def layer(self, name):
        for n, l in self._layers:
            if n == name:
                return l
        raise KeyError(name)

    def forward(self, x, mode="train"):
        for _, layer in self._layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, dout):
        for _, layer in reversed(self._layers):
            dout = layer.backward(dout)
        return dout

    def first_nonfinite_layer(self, x, mode="train"):
        """Name of the first layer whose output is non-finite, or None."""
        for name, layer in self._layers:
            x = layer.forward(x, mode)
            if not np.all(np.isfinite(x)):
                return name
        return None

    def attentive_layers(self):
        out = []

        def walk(prefix, layer):
            if isinstance(layer, AttentiveNorm2d):
                out.append((prefix, layer))
            for name, child in layer.children():
                walk(prefix + "." + name if prefix else name, child)

        walk("", self)
        return out

    def freeze_attentive_for_finetune(self):
        for _, layer in self.attentive_layers():
            layer.freeze_for_finetune()
        return self


def param_count(net):
    """Total learnable coordinates (running statistics excluded)."""
    return sum(p.value.size for _, p in net.named_params())


def build_resnet(spec: NetSpec, seed=0):
    """Assemble stem -> stages -> pool -> classifier per the spec."""
    rng = np.random.default_rng(seed)
    dtype = spec.dtype
    norm = spec.norm
    layers = []
    width0 = spec.stages[0].width

    def stem_norm(channels):
        if norm.kind == "gn":
            return GroupNorm2d(channels, norm.groups, dtype=dtype)
        return BatchNorm2d(channels, dtype=dtype)

    if spec.stem == "imagenet":
        stem_out = 64
        layers.append(("stem_conv", Conv2d(spec.in_channels, stem_out, 7,
                                           stride=2, pad=3, rng=rng, dtype=dtype)))
        layers.append(("stem_norm", stem_norm(stem_out)))
        layers.append(("stem_relu", ReLU()))
        layers.append(("stem_pool", MaxPool2d(3, 2, 1)))
    elif spec.stem == "cifar":
        stem_out = width0
        layers.append(("stem_conv", Conv2d(spec.in_channels, stem_out, 3,
                                           stride=1, pad=1, rng=rng, dtype=dtype)))
        layers.append(("stem_norm", stem_norm(stem_out)))
        layers.append(("stem_relu", ReLU()))
    else:
        raise ConfigError(f"unknown stem {spec.stem!r}")

    in_ch = stem_out
    for si, stage in enumerate(spec.stages):
        k = spec.k_per_stage[si] if spec.k_per_stage else 1
        for bi in range(stage.depth):
            stride = stage.stride if bi == 0 else 1
            block = build_block(stage.block, in_ch, stage.width, stride, norm,
                                k=k, rng=rng, dtype=dtype,
                                zero_gamma=spec.zero_gamma)
            layers.append((f"stage{si + 1}_block{bi}", block))
            in_ch = block.out_channels

    layers.append(("gap", GlobalAvgPool()))
    layers.append(("flatten", Flatten()))
    layers.append(("fc", Linear(in_ch, spec.num_classes, bias=True, rng=rng,
                                dtype=dtype)))
    return Network(layers)


_RESNET_LAYOUTS = {
    "resnet34": ("basic", (3, 4, 6, 3)),
    "resnet50": ("bottleneck", (3, 4, 6, 3)),
    "resnet101": ("bottleneck", (3, 4, 23, 3)),
}

DEFAULT_K_4STAGE = (10, 10, 20, 20)
DEFAULT_K_3STAGE = (10, 20, 20)


def resnet_spec(arch, norm=NormSpec(), k_per_stage=None, num_classes=1000,
                zero_gamma=False, dtype=np.float32):
    if arch not in _RESNET_LAYOUTS:
        raise ConfigError(f"unknown architecture {arch!r}")
    block, depths = _RESNET_LAYOUTS[arch]
    widths = (64, 128, 256, 512)
    strides = (1, 2, 2, 2)
    stages = tuple(StageSpec(block, w, d, s)
                   for w, d, s in zip(widths, depths, strides))
    if norm.kind != "an":
        k = ()
    else:
        k = tuple(k_per_stage) if k_per_stage else DEFAULT_K_4STAGE
    return NetSpec(stem="imagenet", stages=stages, num_classes=num_classes,
                   norm=norm, k_per_stage=k, zero_gamma=zero_gamma, dtype=dtype)


def toy_spec(norm=NormSpec(), k_per_stage=None, num_classes=4,
             zero_gamma=False, dtype=np.float32):
    """Desk-scale 3-stage residual net for 32x32 inputs: widths (16, 32, 64),
    two basic blocks per stage, 3x3 stem."""
    stages = (StageSpec("basic", 16, 2, 1),
              StageSpec("basic", 32, 2, 2),
              StageSpec("basic", 64, 2, 2))
    if norm.kind != "an":
        k = ()
    else:
        k = tuple(k_per_stage) if k_per_stage else DEFAULT_K_3STAGE
    return NetSpec(stem="cifar", stages=stages, num_classes=num_classes,
                   norm=norm, k_per_stage=k, zero_gamma=zero_gamma, dtype=dtype)
