"""Builders for the Mob-INC network.

The trunk is a MobileNetV2-style stack: a 3x3 stride-2 stem into inverted
residual bottlenecks with schedule (t, c, s, repeat) = (1,16,1,1),
(6,24,2,2), (6,32,2,3), (6,64,2,4), (6,96,1,3), ending at 14x14x96 for
224x224 input at width multiplier 1.0. The head taps that output into two
Inception modules, global average pooling, a 512-unit FC with ReLU, and a
final FC projection to the class logits.

All weights are He-normal from a single seeded generator, so building
twice with the same seed is bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graph import ModelGraph
from .ops import (
    Activation,
    Add,
    BatchNorm,
    ConcatChannels,
    Conv2D,
    DepthwiseConv2D,
    Flatten,
    FullyConnected,
    Pool,
)
from .tensor import FLOAT

STEM_CHANNELS = 32
FC1_UNITS = 512


@dataclass(frozen=True)
class BottleneckConfig:
    """One inverted-residual stage: expansion t, stride s, output width, repeats."""

    t: int
    out_channels: int
    stride: int
    repeat: int

    def __post_init__(self):
        if self.t < 1:
            raise ValidationError("expansion factor must be >= 1")
        if self.stride not in (1, 2):
            raise ValidationError("bottleneck stride must be 1 or 2")
        if self.out_channels < 1 or self.repeat < 1:
            raise ValidationError("bottleneck out_channels and repeat must be >= 1")


TRUNK_SCHEDULE = (
    BottleneckConfig(1, 16, 1, 1),
    BottleneckConfig(6, 24, 2, 2),
    BottleneckConfig(6, 32, 2, 3),
    BottleneckConfig(6, 64, 2, 4),
    BottleneckConfig(6, 96, 1, 3),
)


@dataclass(frozen=True)
class InceptionConfig:
    """Filter counts of the four parallel branches."""

    b1_1x1: int
    b2_reduce: int
    b2_3x3: int
    b3_reduce: int
    b3_5x5: int
    b4_proj: int

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 1:
                raise ValidationError(f"inception filter count {name} must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.b1_1x1 + self.b2_3x3 + self.b3_5x5 + self.b4_proj


# Defaults follow the classic GoogLeNet 3a/3b branch widths.
INCEPTION_MODULE_1 = InceptionConfig(64, 96, 128, 16, 32, 32)
INCEPTION_MODULE_2 = InceptionConfig(128, 128, 192, 32, 96, 64)


def round_channels(channels: int, multiplier: float) -> int:
    """Scale a channel count and round to the nearest multiple of 8, min 8."""
    scaled = channels * multiplier
    return max(8, int(math.floor(scaled / 8 + 0.5)) * 8)


def he_conv(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int) -> np.ndarray:
    std = math.sqrt(2.0 / (kh * kw * cin))
    return rng.normal(0.0, std, size=(kh, kw, cin, cout)).astype(FLOAT)


def he_depthwise(rng: np.random.Generator, kh: int, kw: int, c: int) -> np.ndarray:
    std = math.sqrt(2.0 / (kh * kw))
    return rng.normal(0.0, std, size=(kh, kw, c, 1)).astype(FLOAT)


def he_fc(rng: np.random.Generator, din: int, dout: int) -> np.ndarray:
    std = math.sqrt(2.0 / din)
    return rng.normal(0.0, std, size=(din, dout)).astype(FLOAT)


def _fresh_bn(c: int) -> BatchNorm:
    return BatchNorm(
        gamma=np.ones(c, dtype=FLOAT),
        beta=np.zeros(c, dtype=FLOAT),
        running_mean=np.zeros(c, dtype=FLOAT),
        running_var=np.ones(c, dtype=FLOAT),
    )


def _add_conv_bn(graph, rng, prefix, tail, cin, cout, kernel, stride, act):
    """conv (no bias) + batchnorm, optionally followed by an activation."""
    w = he_conv(rng, kernel, kernel, cin, cout)
    graph.add(f"{prefix}.conv", Conv2D(w, None, stride, "same"), tail)
    tail = graph.add(f"{prefix}.bn", _fresh_bn(cout), f"{prefix}.conv")
    if act:
        tail = graph.add(f"{prefix}.{act}", Activation(act), tail)
    return tail


def _add_dw_bn(graph, rng, prefix, tail, c, stride, act):
    w = he_depthwise(rng, 3, 3, c)
    graph.add(f"{prefix}.conv", DepthwiseConv2D(w, None, stride, "same"), tail)
    tail = graph.add(f"{prefix}.bn", _fresh_bn(c), f"{prefix}.conv")
    if act:
        tail = graph.add(f"{prefix}.{act}", Activation(act), tail)
    return tail


def _add_bottleneck(graph, rng, name, tail, cin, t, cout, stride):
    """Inverted residual block: expand 1x1 -> depthwise 3x3 -> project 1x1.

    The t=1 block has no expansion conv. A residual skip is added exactly
    when stride is 1 and the channel count is preserved.
    """
    src = tail
    mid = cin * t
    if t > 1:
        tail = _add_conv_bn(graph, rng, f"{name}.expand", tail, cin, mid, 1, 1, "relu6")
    tail = _add_dw_bn(graph, rng, f"{name}.dw", tail, mid, stride, "relu6")
    tail = _add_conv_bn(graph, rng, f"{name}.project", tail, mid, cout, 1, 1, act=None)
    if stride == 1 and cin == cout:
        tail = graph.add(f"{name}.add", Add(), [src, tail])
    return tail


def build_trunk(width_multiplier: float = 1.0, seed: int = 0) -> ModelGraph:
    """MobileNetV2 bottleneck trunk, truncated at the 14x14 stage.

    Channel counts scale with the width multiplier (nearest multiple of 8,
    minimum 8). Raises ValidationError for multipliers outside (0, 2].
    """
    if not (0.0 < width_multiplier <= 2.0):
        raise ValidationError(f"width multiplier must be in (0, 2], got {width_multiplier}")
    rng = np.random.default_rng(seed)
    graph = ModelGraph()
    c = round_channels(STEM_CHANNELS, width_multiplier)
    tail = _add_conv_bn(graph, rng, "stem", graph.input_id, 3, c, 3, 2, "relu6")
    block = 0
    for stage in TRUNK_SCHEDULE:
        cout = round_channels(stage.out_channels, width_multiplier)
        for i in range(stage.repeat):
            block += 1
            stride = stage.stride if i == 0 else 1
            tail = _add_bottleneck(graph, rng, f"b{block}", tail, c, stage.t, cout, stride)
            c = cout
    graph.trunk_boundary = tail
    graph.output_channels = c
    return graph


def _add_inception(graph, rng, prefix, tail, cin, cfg: InceptionConfig):
    """Four parallel branches on the same input, channel-concatenated.

    Branch convs carry biases and are each followed by ReLU; everything is
    stride 1 with 'same' padding, so spatial dims are preserved.
    """

    def conv_relu(name, src, k, ci, co):
        w = he_conv(rng, k, k, ci, co)
        b = np.zeros(co, dtype=FLOAT)
        graph.add(f"{prefix}.{name}.conv", Conv2D(w, b, 1, "same"), src)
        return graph.add(f"{prefix}.{name}.relu", Activation("relu"), f"{prefix}.{name}.conv")

    b1 = conv_relu("b1", tail, 1, cin, cfg.b1_1x1)
    b2 = conv_relu("b2.reduce", tail, 1, cin, cfg.b2_reduce)
    b2 = conv_relu("b2", b2, 3, cfg.b2_reduce, cfg.b2_3x3)
    b3 = conv_relu("b3.reduce", tail, 1, cin, cfg.b3_reduce)
    b3 = conv_relu("b3", b3, 5, cfg.b3_reduce, cfg.b3_5x5)
    pool = graph.add(f"{prefix}.b4.pool", Pool("max", window=3, stride=1, padding="same"), tail)
    b4 = conv_relu("b4.proj", pool, 1, cin, cfg.b4_proj)
    return graph.add(f"{prefix}.concat", ConcatChannels(), [b1, b2, b3, b4])


def build_inception(in_channels: int, cfg: InceptionConfig, seed: int = 0) -> ModelGraph:
    """Standalone single-module inception graph, mainly for testing."""
    rng = np.random.default_rng(seed)
    graph = ModelGraph()
    _add_inception(graph, rng, "inc", graph.input_id, in_channels, cfg)
    graph.output_channels = cfg.out_channels
    return graph


def assemble_mob_inc(
    trunk: ModelGraph,
    inception_cfgs: tuple[InceptionConfig, InceptionConfig] = (
        INCEPTION_MODULE_1,
        INCEPTION_MODULE_2,
    ),
    num_classes: int = 4,
    seed: int = 0,
) -> ModelGraph:
    """Extend a built trunk with the Inception + FC head, in place.

    The trunk's final node stays recorded as the freeze boundary. Head
    parameters are drawn from their own seeded generator.
    """
    if trunk.trunk_boundary is None or trunk.output_channels is None:
        raise ValidationError("assemble_mob_inc needs a graph produced by build_trunk")
    if num_classes < 2:
        raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    graph = trunk
    tail = graph.trunk_boundary
    c = graph.output_channels
    cfg1, cfg2 = inception_cfgs
    tail = _add_inception(graph, rng, "inc1", tail, c, cfg1)
    tail = _add_inception(graph, rng, "inc2", tail, cfg1.out_channels, cfg2)
    tail = graph.add("gap", Pool("global_avg"), tail)
    tail = graph.add("flatten", Flatten(), tail)
    graph.add(
        "fc1",
        FullyConnected(
            he_fc(rng, cfg2.out_channels, FC1_UNITS), np.zeros(FC1_UNITS, dtype=FLOAT)
        ),
        tail,
    )
    tail = graph.add("fc1.relu", Activation("relu"), "fc1")
    graph.add(
        "logits",
        FullyConnected(he_fc(rng, FC1_UNITS, num_classes), np.zeros(num_classes, dtype=FLOAT)),
        tail,
    )
    graph.output_channels = num_classes
    return graph


def build_mob_inc(
    width_multiplier: float = 1.0,
    num_classes: int = 4,
    seed: int = 0,
    inception_cfgs: tuple[InceptionConfig, InceptionConfig] = (
        INCEPTION_MODULE_1,
        INCEPTION_MODULE_2,
    ),
) -> ModelGraph:
    """Build trunk and head in one call (trunk seed = seed, head seed = seed + 1)."""
    trunk = build_trunk(width_multiplier, seed=seed)
    return assemble_mob_inc(trunk, inception_cfgs, num_classes=num_classes, seed=seed + 1)


def count_parameters(graph: ModelGraph, trainable_only: bool = False) -> int:
    """Exact number of weight elements (batch-norm running stats excluded)."""
    return sum(arr.size for _, arr, _ in graph.parameters(trainable_only))
