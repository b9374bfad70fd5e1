"""Student graphs: binary DenseNet-28, MeliusNet-22 and truncated tiny models.

Both networks share one layout: a real-valued two-convolution stem that
downsamples the 98 x 64 log-mel image by 16, sections of binary 3x3
convolutions that each append 64 channels, and transitions of batch norm,
2x2 max pooling and a binary 1x1 "pw" convolution. The embedding is a global
max pool over the final batch norm.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import (INPUT, BatchNorm, BinaryConv2D, Concatenate, Conv2D, GlobalMaxPool,
                    ImprovementAdd, LayerGraph, MaxPool2D, ReLU)
from .ops import ConvSpec

INPUT_SHAPE = (98, 64, 1)
GROWTH = 64
DEFAULT_TAP = "batch-normalization-12"


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "densenet28"
    tap: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {sorted(ARCHS)}")


def _stem(g, stem_filters, filters):
    x = INPUT
    x = g.add(Conv2D(g.next_name("conv2d"), [x], ConvSpec(7, 7, 1, stem_filters, 2), g.rng))
    x = g.add(BatchNorm(g.next_name("batch-normalization"), [x], stem_filters))
    x = g.add(ReLU(g.next_name("relu"), [x]))
    x = g.add(MaxPool2D(g.next_name("max-pool"), [x], 3, 2))
    x = g.add(Conv2D(g.next_name("conv2d"), [x], ConvSpec(5, 5, stem_filters, filters, 2), g.rng))
    x = g.add(BatchNorm(g.next_name("batch-normalization"), [x], filters))
    x = g.add(ReLU(g.next_name("relu"), [x]))
    return g.add(MaxPool2D(g.next_name("max-pool"), [x], 2, 2))


def _bn_bconv(g, x, channels, out=GROWTH, k=3):
    y = g.add(BatchNorm(g.next_name("batch-normalization"), [x], channels))
    return g.add(BinaryConv2D(g.next_name("binary-conv2d"), [y],
                              ConvSpec(k, k, channels, out, 1, "same", True), g.rng))


def _dense_layer(g, x):
    c = g.shapes[x][-1]
    y = _bn_bconv(g, x, c)
    return g.add(Concatenate(g.next_name("concatenate"), [x, y]))


def _improvement_layer(g, x):
    c = g.shapes[x][-1]
    y = _bn_bconv(g, x, c)
    return g.add(ImprovementAdd(g.next_name("improvement-add"), [x, y]))


def _transition(g, x, section, out):
    c = g.shapes[x][-1]
    x = g.add(BatchNorm(g.next_name("batch-normalization"), [x], c))
    x = g.add(MaxPool2D(g.next_name("max-pool"), [x], 2, 2))
    return g.add(BinaryConv2D(f"section-{section}-transition-pw", [x],
                              ConvSpec(1, 1, c, out, 1, "same", True), g.rng))


def _head(g, x):
    x = g.add(BatchNorm(g.next_name("batch-normalization"), [x], g.shapes[x][-1]))
    g.add(GlobalMaxPool(g.next_name("global-max-pool"), [x]))
    return g


def build_densenet28(seed=0) -> LayerGraph:
    """Binary DenseNet-28: sections of 6/6/6/5 dense layers, 576-d embedding."""
    g = LayerGraph("densenet28", INPUT_SHAPE, seed)
    x = _stem(g, 32, 144)
    layers = (6, 6, 6, 5)
    transitions = (128, 96, 256)
    for section, n in enumerate(layers, start=1):
        for _ in range(n):
            x = _dense_layer(g, x)
        if section <= len(transitions):
            x = _transition(g, x, section, transitions[section - 1])
    return _head(g, x)


def build_meliusnet22(seed=0) -> LayerGraph:
    """MeliusNet-22: 4/5/4/6 dense + improvement pairs, 512-d embedding."""
    g = LayerGraph("meliusnet22", INPUT_SHAPE, seed)
    x = _stem(g, 32, 96)
    blocks = (4, 5, 4, 6)
    transitions = (128, 128, 128)
    for section, n in enumerate(blocks, start=1):
        for _ in range(n):
            x = _dense_layer(g, x)
            x = _improvement_layer(g, x)
        if section <= len(transitions):
            x = _transition(g, x, section, transitions[section - 1])
    return _head(g, x)


def build_tiny(tap=DEFAULT_TAP, base: LayerGraph | None = None, seed=0) -> LayerGraph:
    """DenseNet-28 truncated at ``tap`` and globally max-pooled.

    Weights are copied from ``base`` when given.
    """
    base = base if base is not None else build_densenet28(seed)
    return base.truncate(tap)


ARCHS = {
    "densenet28": build_densenet28,
    "meliusnet22": build_meliusnet22,
    "tiny": build_tiny,
}


def build(config: ModelConfig | str, seed=None) -> LayerGraph:
    if isinstance(config, str):
        config = ModelConfig(config)
    seed = config.seed if seed is None else seed
    if config.arch == "tiny":
        return build_tiny(config.tap or DEFAULT_TAP, seed=seed)
    g = ARCHS[config.arch](seed)
    return g.truncate(config.tap) if config.tap else g


def improvement_layers(g: LayerGraph):
    return [layer for layer in g.layers if layer.kind == "improvement_add"]


def eligible_taps(g: LayerGraph):
    """Batch-norm and transition layers, in construction order."""
    return [layer.name for layer in g.layers
            if layer.kind == "batch_norm" or "transition" in layer.name]
