"""Layer set with explicit forward/backward passes.

Every layer works on batched arrays (batch axis first) and returns a cache from
``forward`` that ``backward`` consumes.  Gradients are returned as a dict keyed
by parameter name; quantizer surrogate gradients use the keys
``weight_scale``/``weight_bias`` and ``act_scale``/``act_bias``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..quant import QuantParams, fake_quantize, ste_backward
from .tensor import QuantState, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.weight_qp: QuantParams | None = None
        self.act_qp: QuantParams | None = None
        self.name = self.kind

    def config(self) -> dict:
        return {"kind": self.kind}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x, state: QuantState, train: bool):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def _expect_rank(self, in_shape, rank):
        if len(in_shape) != rank:
            raise ShapeError(self.name, f"rank-{rank} per-example input", in_shape)


def _maybe_quant_weight(layer: Layer, state: QuantState):
    w = layer.params["weight"]
    qp = layer.weight_qp
    if state.weights and qp is not None and not qp.passthrough:
        return fake_quantize(w, qp), True
    return w, False


def _weight_grads(layer: Layer, dw_eff, quantized: bool, db) -> dict:
    if not quantized:
        return {"weight": dw_eff, "bias": db}
    dw, ds, dbias = ste_backward(dw_eff, layer.params["weight"], layer.weight_qp)
    return {"weight": dw, "bias": db, "weight_scale": ds, "weight_bias": dbias}


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng=None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / in_features)
        self.params["weight"] = (rng.standard_normal((out_features, in_features)) * std).astype(np.float32)
        self.params["bias"] = np.zeros(out_features, np.float32)

    def config(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(self.name, (self.in_features,), in_shape)
        return (self.out_features,)

    def forward(self, x, state, train):
        w, quantized = _maybe_quant_weight(self, state)
        out = x @ w.T + self.params["bias"]
        return out, (x, w, quantized)

    def backward(self, dout, cache):
        x, w, quantized = cache
        dw = dout.T @ x
        db = dout.sum(axis=0)
        return dout @ w, _weight_grads(self, dw, quantized, db)


class Conv2d(Layer):
    """Stride-1 convolution with symmetric zero padding (im2col)."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 padding: int | None = None, rng=None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = kernel_size
        self.padding = kernel_size // 2 if padding is None else padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.params["weight"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        self.params["bias"] = np.zeros(out_channels, np.float32)

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "padding": self.padding}

    def out_shape(self, in_shape):
        self._expect_rank(in_shape, 3)
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(self.name, f"({self.in_channels}, H, W)", in_shape)
        k, p = self.kernel_size, self.padding
        oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
        if oh < 1 or ow < 1:
            raise ShapeError(self.name, f"spatial size >= {k - 2 * p}", in_shape)
        return (self.out_channels, oh, ow)

    def _cols(self, x):
        p, k = self.padding, self.kernel_size
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, OH, OW, k, k
        n, c, oh, ow = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
        return cols, (n, oh, ow)

    def forward(self, x, state, train):
        w, quantized = _maybe_quant_weight(self, state)
        cols, (n, oh, ow) = self._cols(x)
        out = cols @ w.reshape(self.out_channels, -1).T + self.params["bias"]
        out = out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols, w, quantized)

    def backward(self, dout, cache):
        x_shape, cols, w, quantized = cache
        n, c, h, wd = x_shape
        k, p = self.kernel_size, self.padding
        oh, ow = dout.shape[2], dout.shape[3]
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        dw = (d2.T @ cols).reshape(w.shape)
        db = d2.sum(axis=0)
        dcols = (d2 @ w.reshape(self.out_channels, -1)).reshape(n, oh, ow, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return np.ascontiguousarray(dx), _weight_grads(self, dw, quantized, db)


class BatchNorm(Layer):
    """Batch normalization over the channel axis (axis 1) of 2-D or 4-D inputs."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, np.float32)
        self.params["beta"] = np.zeros(channels, np.float32)
        self.buffers["running_mean"] = np.zeros(channels, np.float32)
        self.buffers["running_var"] = np.ones(channels, np.float32)

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def out_shape(self, in_shape):
        if len(in_shape) not in (1, 3) or in_shape[0] != self.channels:
            raise ShapeError(self.name, f"({self.channels}, ...)", in_shape)
        return in_shape

    @staticmethod
    def _bshape(x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, state, train):
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            m = x.size // x.shape[1]
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            unbiased = var * (m / max(m - 1, 1))
            self.buffers["running_mean"] = ((1 - self.momentum) * rm + self.momentum * mean).astype(rm.dtype)
            self.buffers["running_var"] = ((1 - self.momentum) * rv + self.momentum * unbiased).astype(rv.dtype)
        else:
            mean = self.buffers["running_mean"].astype(x.dtype)
            var = self.buffers["running_var"].astype(x.dtype)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        out = gamma.reshape(bs) * xhat + beta.reshape(bs)
        return out, (xhat, inv_std, train)

    def backward(self, dout, cache):
        xhat, inv_std, train = cache
        axes = (0,) + tuple(range(2, dout.ndim))
        bs = self._bshape(dout)
        gamma = self.params["gamma"]
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dxhat = dout * gamma.reshape(bs)
        if not train:
            return dxhat * inv_std.reshape(bs), grads
        m = dout.size // dout.shape[1]
        s1 = dxhat.sum(axis=axes).reshape(bs)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bs)
        dx = (inv_std.reshape(bs) / m) * (m * dxhat - s1 - xhat * s2)
        return dx, grads


class ReLU(Layer):
    """ReLU followed by the (unsigned) activation quantizer site."""

    kind = "relu"

    def forward(self, x, state, train):
        mask = x > 0
        out = np.where(mask, x, 0).astype(x.dtype, copy=False)
        qp = self.act_qp
        if state.activations and qp is not None and not qp.passthrough:
            return fake_quantize(out, qp), (mask, out)
        return out, (mask, None)

    def backward(self, dout, cache):
        mask, pre_quant = cache
        grads = {}
        if pre_quant is not None:
            dout, ds, db = ste_backward(dout, pre_quant, self.act_qp)
            grads = {"act_scale": ds, "act_bias": db}
        return np.where(mask, dout, 0).astype(dout.dtype, copy=False), grads


class MaxPool2(Layer):
    kind = "maxpool"

    def out_shape(self, in_shape):
        self._expect_rank(in_shape, 3)
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeError(self.name, "even spatial dims", in_shape)
        return (c, h // 2, w // 2)

    def forward(self, x, state, train):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache):
        (n, c, h, w), idx = cache
        dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return dx, {}


class AvgPool(Layer):
    """Average pooling: 2x2 stride-2 windows, or global ([N, C, H, W] -> [N, C]) when ``kernel`` is None."""

    kind = "avgpool"

    def __init__(self, kernel: int | None = None):
        super().__init__()
        if kernel not in (None, 2):
            raise ValueError("avgpool supports 2x2 windows or global pooling")
        self.kernel = kernel

    def config(self):
        return {"kind": self.kind, "kernel": self.kernel}

    def out_shape(self, in_shape):
        self._expect_rank(in_shape, 3)
        c, h, w = in_shape
        if self.kernel is None:
            return (c,)
        if h % 2 or w % 2:
            raise ShapeError(self.name, "even spatial dims", in_shape)
        return (c, h // 2, w // 2)

    def forward(self, x, state, train):
        if self.kernel is None:
            return x.mean(axis=(2, 3)), x.shape
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), x.shape

    def backward(self, dout, cache):
        n, c, h, w = cache
        if self.kernel is None:
            dx = np.broadcast_to((dout / (h * w))[:, :, None, None], cache)
            return np.ascontiguousarray(dx), {}
        d = (dout / 4)[:, :, :, None, :, None]
        dx = np.broadcast_to(d, (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w)
        return np.ascontiguousarray(dx), {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, state, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}


LAYER_TYPES = {cls.kind: cls for cls in (Linear, Conv2d, BatchNorm, ReLU, MaxPool2, AvgPool, Flatten)}
QUANT_WEIGHT_KINDS = ("linear", "conv2d")


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    cls = LAYER_TYPES[cfg.pop("kind")]
    return cls(**cfg)
