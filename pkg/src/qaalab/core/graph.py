"""Layer graph (the model), forward/backward passes and the softmax cross-entropy head."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..quant import QuantParams
from .layers import Layer, layer_from_config
from .tensor import FULL, STORAGE_DTYPE, NumericFault, QuantState, ShapeError, check_finite

QP_SUFFIXES = {"weight_scale": ("weight_qp", "scale"), "weight_bias": ("weight_qp", "bias"),
               "act_scale": ("act_qp", "scale"), "act_bias": ("act_qp", "bias")}


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, y, reduction: str = "mean"):
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    Returns ``(loss, dlogits)``; with ``reduction="none"`` the loss is per example
    and ``dlogits`` is the per-example gradient.
    """
    y = np.asarray(y)
    n = logits.shape[0]
    lsm = log_softmax(logits)
    per_example = -lsm[np.arange(n), y]
    d = np.exp(lsm)
    d[np.arange(n), y] -= 1
    if reduction == "none":
        return per_example, d
    return float(per_example.mean()), d / n


def per_example_loss(logits, y) -> np.ndarray:
    return -log_softmax(logits)[np.arange(logits.shape[0]), np.asarray(y)]


@dataclass
class ForwardResult:
    logits: np.ndarray
    features: list
    caches: list = field(default_factory=list, repr=False)
    state: QuantState = FULL


class LayerGraph:
    """Ordered layer list with per-site quantization parameters.

    ``taps`` lists the layer indices whose outputs are reported as features;
    by default every ReLU (post activation quantizer).
    """

    def __init__(self, arch_id: str, input_shape, layers: list[Layer], num_classes: int,
                 taps: list[int] | None = None):
        self.arch_id = arch_id
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = layers
        self.num_classes = int(num_classes)
        for i, layer in enumerate(layers):
            layer.name = f"{i}:{layer.kind}"
        self.taps = list(taps) if taps is not None else [i for i, l in enumerate(layers) if l.kind == "relu"]
        self.validate()

    # -- structure ---------------------------------------------------------
    def validate(self):
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (self.num_classes,):
            raise ShapeError("output", (self.num_classes,), shape)
        for layer in self.layers:
            if "running_var" in layer.buffers and not np.all(layer.buffers["running_var"] > 0):
                raise ValueError(f"{layer.name}: running variance must be strictly positive")
        for t in self.taps:
            if not 0 <= t < len(self.layers):
                raise ValueError(f"feature tap {t} out of range")

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"{i}.{name}", arr

    def set_parameter(self, key: str, value: np.ndarray):
        i, name = key.split(".", 1)
        self.layers[int(i)].params[name] = value

    def quant_sites(self):
        """Yield ``(key, QuantParams)`` for every quantizable site."""
        for i, layer in enumerate(self.layers):
            if layer.weight_qp is not None:
                yield f"{i}.weight_qp", layer.weight_qp
            if layer.act_qp is not None:
                yield f"{i}.act_qp", layer.act_qp

    def has_activation_quant(self) -> bool:
        return any(l.act_qp is not None for l in self.layers)

    def has_weight_quant(self) -> bool:
        return any(l.weight_qp is not None for l in self.layers)

    def max_bits(self) -> int:
        return max((qp.bits for _, qp in self.quant_sites()), default=32)

    def native_state(self) -> QuantState:
        """The state the model was built to run in: quantized wherever a site is below 32 bits."""
        w = any(l.weight_qp is not None and not l.weight_qp.passthrough for l in self.layers)
        a = any(l.act_qp is not None and not l.act_qp.passthrough for l in self.layers)
        return QuantState(w, a)

    def supports(self, state: QuantState) -> bool:
        if state.weights and not self.has_weight_quant():
            return False
        if state.activations and not self.has_activation_quant():
            return False
        return True

    @property
    def dtype(self):
        for layer in self.layers:
            for arr in layer.params.values():
                return arr.dtype
        return getattr(self, "_dtype", np.dtype(STORAGE_DTYPE))

    def copy(self) -> "LayerGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "LayerGraph":
        m = self.copy()
        m._dtype = np.dtype(dtype)
        for layer in m.layers:
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
            layer.buffers = {k: v.astype(dtype) for k, v in layer.buffers.items()}
        return m

    def spec(self) -> dict:
        return {"arch_id": self.arch_id, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "taps": self.taps,
                "layers": [l.config() for l in self.layers]}

    @classmethod
    def from_spec(cls, spec: dict) -> "LayerGraph":
        layers = [layer_from_config(c) for c in spec["layers"]]
        return cls(spec["arch_id"], spec["input_shape"], layers, spec["num_classes"], spec["taps"])

    # -- computation -------------------------------------------------------
    def forward(self, x, state: QuantState = FULL, train: bool = False, keep_cache: bool = False) -> ForwardResult:
        x = np.asarray(x)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("input", self.input_shape, x.shape[1:])
        if (state.weights and not self.has_weight_quant()) or (state.activations and not self.has_activation_quant()):
            raise ValueError(f"model {self.arch_id} has no quantizer sites for state {state.label()}")
        x = x.astype(self.dtype, copy=False)
        check_finite(x, "input")
        caches, features = [], []
        taps = set(self.taps)
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(x, state, train)
            if not np.all(np.isfinite(x)):
                raise NumericFault(layer.name)
            if keep_cache:
                caches.append(cache)
            if i in taps:
                features.append(x)
        return ForwardResult(x, features, caches, state)

    def backward(self, fwd: ForwardResult, dlogits: np.ndarray):
        """Back-propagate ``dlogits``; returns ``(grad_input, grad_params)``."""
        if len(fwd.caches) != len(self.layers):
            raise ValueError("forward result was computed without keep_cache=True")
        grads: dict[str, object] = {}
        d = np.asarray(dlogits, dtype=fwd.logits.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(d, fwd.caches[i])
            for name, val in g.items():
                grads[f"{i}.{name}"] = val
        return d, grads

    def apply_quant_update(self, key: str, value: float):
        i, name = key.split(".", 1)
        attr, field_name = QP_SUFFIXES[name]
        qp: QuantParams = getattr(self.layers[int(i)], attr)
        setattr(qp, field_name, max(value, 1e-8) if field_name == "scale" else value)


def forward(model: LayerGraph, x, state: QuantState = FULL, train: bool = False):
    """Logits and tapped features."""
    r = model.forward(x, state, train)
    return r.logits, r.features


def backprop(model: LayerGraph, x, y, state: QuantState = FULL, train: bool = False, head=None):
    """Loss, input gradient and parameter gradients.

    ``head(logits, y) -> (loss, dlogits)`` defaults to mean softmax cross-entropy.
    """
    head = head or cross_entropy
    fwd = model.forward(x, state, train, keep_cache=True)
    loss, dlogits = head(fwd.logits, y)
    if not np.isfinite(loss):
        raise NumericFault("loss")
    dx, grads = model.backward(fwd, dlogits)
    return loss, dx, grads


def input_gradient(model: LayerGraph, x, y, state: QuantState = FULL):
    """Per-example loss and gradient of the summed loss w.r.t. the input."""
    fwd = model.forward(x, state, False, keep_cache=True)
    losses, d = cross_entropy(fwd.logits, y, reduction="none")
    dx, _ = model.backward(fwd, d)
    return losses, dx
