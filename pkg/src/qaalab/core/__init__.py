"""Deterministic numpy tensor engine: layers, layer graph, backprop, gradient checks."""

from .architectures import ARCHITECTURES, attach_quantizers, build_model
from .gradcheck import QuantizerInFragment, grad_check
from .graph import (ForwardResult, LayerGraph, backprop, cross_entropy, forward, input_gradient,
                    log_softmax, per_example_loss, softmax)
from .layers import AvgPool, BatchNorm, Conv2d, Flatten, Layer, Linear, MaxPool2, ReLU
from .tensor import (FULL, QUANTIZED, WEIGHTS_ONLY, EngineError, NumericFault, QuantState,
                     ShapeError, as_tensor)

__all__ = [
    "ARCHITECTURES", "AvgPool", "BatchNorm", "Conv2d", "EngineError", "FULL", "Flatten",
    "ForwardResult", "Layer", "LayerGraph", "Linear", "MaxPool2", "NumericFault", "QUANTIZED",
    "QuantState", "QuantizerInFragment", "ReLU", "ShapeError", "WEIGHTS_ONLY", "as_tensor",
    "attach_quantizers", "backprop", "build_model", "cross_entropy", "forward", "grad_check",
    "input_gradient", "log_softmax", "per_example_loss", "softmax",
]
