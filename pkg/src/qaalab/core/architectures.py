"""The fixed desk-scale architectures and quantizer-site attachment."""

from __future__ import annotations

import numpy as np

from ..quant import QuantParams
from .graph import LayerGraph
from .layers import AvgPool, BatchNorm, Conv2d, Flatten, Linear, MaxPool2, ReLU
from .layers import QUANT_WEIGHT_KINDS

ARCHITECTURES = ("convnet_a", "convnet_b", "mlp3")


def _conv_block(c_in, c_out, rng):
    return [Conv2d(c_in, c_out, 3, rng=rng), BatchNorm(c_out), ReLU()]


def build_layers(arch: str, input_shape, num_classes: int, rng, width: int = 8):
    c, h, w = input_shape
    if arch == "convnet_a":
        return [*_conv_block(c, width, rng), MaxPool2(), *_conv_block(width, 2 * width, rng), MaxPool2(),
                Flatten(), Linear(2 * width * (h // 4) * (w // 4), num_classes, rng=rng)]
    if arch == "convnet_b":
        return [*_conv_block(c, width, rng), *_conv_block(width, width, rng), MaxPool2(),
                *_conv_block(width, 2 * width, rng), *_conv_block(2 * width, 2 * width, rng),
                AvgPool(2), Flatten(), Linear(2 * width * (h // 4) * (w // 4), num_classes, rng=rng)]
    if arch == "mlp3":
        d = c * h * w
        hidden = 8 * width
        return [Flatten(), Linear(d, hidden, rng=rng), ReLU(), Linear(hidden, hidden, rng=rng), ReLU(),
                Linear(hidden, num_classes, rng=rng)]
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")


def attach_quantizers(model: LayerGraph, bits: int) -> LayerGraph:
    """Give every weight site a signed and every ReLU an unsigned QuantParams record."""
    for layer in model.layers:
        if layer.kind in QUANT_WEIGHT_KINDS:
            layer.weight_qp = QuantParams(bits, 1.0, 0.0, signed=True)
        elif layer.kind == "relu":
            layer.act_qp = QuantParams(bits, 1.0, 0.0, signed=False)
    return model


def build_model(arch: str, input_shape=(1, 8, 8), num_classes: int = 10, bits: int = 32,
                seed: int = 0, width: int = 8) -> LayerGraph:
    rng = np.random.default_rng(seed)
    layers = build_layers(arch, tuple(input_shape), num_classes, rng, width)
    model = LayerGraph(arch, input_shape, layers, num_classes)
    return attach_quantizers(model, bits)
