"""Quantizer-free layer fragments and random points for finite-difference checks."""

import numpy as np

from qaalab.core import AvgPool, BatchNorm, Conv2d, Flatten, LayerGraph, Linear, MaxPool2, ReLU


def _bn(channels, rng):
    bn = BatchNorm(channels)
    bn.params["gamma"] = rng.uniform(0.5, 1.5, channels).astype(np.float32)
    bn.params["beta"] = rng.normal(0, 0.3, channels).astype(np.float32)
    bn.buffers["running_mean"] = rng.normal(0, 0.3, channels).astype(np.float32)
    bn.buffers["running_var"] = rng.uniform(0.5, 2.0, channels).astype(np.float32)
    return bn


def fragment(kind: str, seed: int = 0):
    """``(graph, input shape, train_mode)`` for one layer kind, closed by Flatten when needed."""
    rng = np.random.default_rng(seed)
    if kind == "linear":
        return LayerGraph("f", (6,), [Linear(6, 4, rng)], 4), (6,), False
    if kind == "relu":
        return LayerGraph("f", (6,), [ReLU()], 6), (6,), False
    if kind == "conv2d":
        return LayerGraph("f", (2, 4, 4), [Conv2d(2, 3, 3, rng=rng), Flatten()], 48), (2, 4, 4), False
    if kind == "batchnorm_eval":
        return LayerGraph("f", (3, 2, 2), [_bn(3, rng), Flatten()], 12), (3, 2, 2), False
    if kind == "batchnorm_train":
        return LayerGraph("f", (3, 2, 2), [_bn(3, rng), Flatten()], 12), (3, 2, 2), True
    if kind == "maxpool":
        return LayerGraph("f", (2, 4, 4), [MaxPool2(), Flatten()], 8), (2, 4, 4), False
    if kind == "avgpool2":
        return LayerGraph("f", (2, 4, 4), [AvgPool(2), Flatten()], 8), (2, 4, 4), False
    if kind == "avgpool_global":
        return LayerGraph("f", (2, 4, 4), [AvgPool()], 2), (2, 4, 4), False
    if kind == "flatten":
        return LayerGraph("f", (2, 3), [Flatten()], 6), (2, 3), False
    if kind == "conv_bn_relu":
        layers = [Conv2d(1, 2, 3, rng=rng), _bn(2, rng), ReLU(), Flatten()]
        return LayerGraph("f", (1, 4, 4), layers, 32), (1, 4, 4), False
    raise KeyError(kind)


LAYER_KINDS = ["linear", "relu", "conv2d", "batchnorm_eval", "batchnorm_train", "maxpool", "avgpool2",
               "avgpool_global", "flatten"]


def random_point(kind: str, shape, rng, batch: int = 2):
    x = rng.standard_normal((batch, *shape))
    if kind == "relu":
        # keep clear of the kink
        x = np.sign(x) * (0.1 + np.abs(x))
    return x
