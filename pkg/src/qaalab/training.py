"""Model zoo production: standard training, QAT, PTQ, QAA fine-tuning, PGD adversarial training."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, pgd, qaa_states
from .core.architectures import attach_quantizers, build_model
from .core.graph import LayerGraph, backprop
from .core.tensor import FULL, QUANTIZED, QuantState
from .quant import calibrate_minmax, calibrate_mse, fake_quantize

log = logging.getLogger(__name__)

ACT_KEYS = ("act_scale", "act_bias")
QUANT_KEYS = ("weight_scale", "weight_bias") + ACT_KEYS


class DivergedTraining(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    bits: int = 32
    width: int = 8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def to_dict(self):
        return asdict(self)


class CheckpointCollection(list):
    """Model snapshots taken at fixed batch intervals during fine-tuning."""

    def append(self, model: LayerGraph):
        if self and model.arch_id != self[0].arch_id:
            raise ValueError("all checkpoints must share one architecture")
        super().append(model)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    states: list = field(default_factory=list)
    path: Path | None = None

    def record(self, entry: dict):
        self.epochs.append(entry)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _is_quant_key(key: str) -> bool:
    return key.split(".", 1)[1] in QUANT_KEYS


def quant_grad_scales(model: LayerGraph) -> dict[str, float]:
    """LSQ step-size gradient scaling ``1 / sqrt(numel * Qp)`` per quantizer parameter key.

    ``numel`` is the weight count for weight sites and the per-example feature
    count for activation sites.
    """
    scales = {}
    shape = model.input_shape
    for i, layer in enumerate(model.layers):
        shape = layer.out_shape(shape)
        for prefix, qp, numel in (("weight", layer.weight_qp, layer.params.get("weight", np.zeros(0)).size),
                                  ("act", layer.act_qp, int(np.prod(shape)))):
            if qp is None or qp.passthrough:
                continue
            factor = 1.0 / np.sqrt(max(numel, 1) * max(qp.grid[1], 1))
            scales[f"{i}.{prefix}_scale"] = scales[f"{i}.{prefix}_bias"] = float(factor)
    return scales


class SGD:
    """SGD with momentum and L2 weight decay.

    Quantizer scales/biases get no decay and have their surrogate gradients
    multiplied by the LSQ factor from ``quant_grad_scales``.
    """

    def __init__(self, model: LayerGraph, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.model, self.lr, self.momentum, self.weight_decay = model, lr, momentum, weight_decay
        self.velocity: dict[str, object] = {}
        self.params = dict(model.named_parameters())
        self.quant_scale = quant_grad_scales(model)

    def _quant_value(self, key):
        i, name = key.split(".", 1)
        layer = self.model.layers[int(i)]
        qp = layer.weight_qp if name.startswith("weight") else layer.act_qp
        return qp.scale if name.endswith("scale") else qp.bias

    def step(self, grads: dict):
        for key in sorted(grads):
            g = grads[key]
            if _is_quant_key(key):
                v = self.momentum * self.velocity.get(key, 0.0) + g * self.quant_scale.get(key, 1.0)
                self.velocity[key] = v
                self.model.apply_quant_update(key, self._quant_value(key) - self.lr * v)
                continue
            p = self.params[key]
            d = g + self.weight_decay * p if self.weight_decay else g
            v = self.velocity.get(key)
            v = d.copy() if v is None else self.momentum * v + d
            self.velocity[key] = v
            p -= (self.lr * v).astype(p.dtype, copy=False)


def _batches(n: int, batch_size: int, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _fit(model: LayerGraph, data, cfg: TrainConfig, state_for_batch, keep_keys=None,
         perturb=None, checkpoints=None, checkpoint_every=None, train_log=None, tag="train") -> TrainLog:
    """Shared SGD loop.  ``state_for_batch(i)`` picks the quantization state of batch ``i``;
    ``keep_keys(state)`` optionally filters the gradient keys that are updated."""
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    tlog = train_log if train_log is not None else TrainLog()
    images, labels = data.images, data.labels
    batch_idx = 0
    for epoch in range(cfg.epochs):
        total, correct, seen = 0.0, 0, 0
        for idx in _batches(len(labels), cfg.batch_size, rng):
            xb, yb = images[idx], labels[idx]
            state = state_for_batch(batch_idx)
            tlog.states.append(state.label())
            if perturb is not None:
                xb = perturb(model, xb, yb, state)
            loss, _, grads = backprop(model, xb, yb, state, train=True)
            if not np.isfinite(loss):
                raise DivergedTraining(f"{tag}: non-finite loss at epoch {epoch}, batch {batch_idx}")
            if keep_keys is not None:
                grads = {k: v for k, v in grads.items() if keep_keys(state, k)}
            opt.step(grads)
            total += loss * len(yb)
            seen += len(yb)
            batch_idx += 1
            if checkpoints is not None and checkpoint_every and batch_idx % checkpoint_every == 0:
                checkpoints.append(model.copy())
        entry = {"tag": tag, "epoch": epoch, "loss": total / max(seen, 1), "seed": cfg.seed, "bits": cfg.bits}
        tlog.record(entry)
        log.info("%s epoch %d loss %.4f", tag, epoch, entry["loss"])
    return tlog


def _input_meta(data):
    return tuple(data.images.shape[1:]), data.num_classes


def train_standard(arch: str, data, cfg: TrainConfig, train_log: TrainLog | None = None) -> LayerGraph:
    """Full-precision training (every site at the 32-bit sentinel)."""
    if cfg.bits != 32:
        raise ValueError("train_standard requires bits=32; use qat_train for quantized models")
    shape, classes = _input_meta(data)
    model = build_model(arch, shape, classes, 32, cfg.seed, cfg.width)
    _fit(model, data, cfg, lambda i: FULL, train_log=train_log, tag=f"{arch}-32")
    return model


def relu_outputs(model: LayerGraph, x, state: QuantState, train: bool = False) -> dict[int, np.ndarray]:
    """Pre-quantizer ReLU outputs per layer index (BN statistics are never updated)."""
    work = model.copy() if train else model
    out = {}
    h = np.asarray(x, dtype=model.dtype)
    plain = QuantState(state.weights, False)
    for i, layer in enumerate(work.layers):
        h, _ = layer.forward(h, plain, train)
        if layer.kind == "relu":
            out[i] = h
            if state.activations and layer.act_qp is not None:
                h = fake_quantize(h, layer.act_qp)
    return out


def calibrate_model(model: LayerGraph, x_calib, method: str = "minmax", weights: bool = True,
                    train_stats: bool = False) -> LayerGraph:
    calib = calibrate_minmax if method == "minmax" else calibrate_mse
    for layer in model.layers:
        if weights and layer.weight_qp is not None and not layer.weight_qp.passthrough:
            qp = calib(layer.params["weight"], layer.weight_qp.bits, True)
            layer.weight_qp.scale, layer.weight_qp.bias = qp.scale, qp.bias
    acts = relu_outputs(model, x_calib, QuantState(weights and model.has_weight_quant(), False), train_stats)
    for i, a in acts.items():
        qp0 = model.layers[i].act_qp
        if qp0 is None or qp0.passthrough:
            continue
        qp = calib(a, qp0.bits, False)
        qp0.scale, qp0.bias = qp.scale, qp.bias
    return model


def qat_train(arch: str, data, cfg: TrainConfig, init: LayerGraph | None = None, train_log: TrainLog | None = None,
              calib_size: int = 256, calib_method: str = "mse") -> LayerGraph:
    """Quantization-aware training with weights and activations fake-quantized.

    Trains from scratch, or fine-tunes ``init`` (a full-precision model) when given.
    """
    if not 1 <= cfg.bits <= 8 and cfg.bits != 32:
        raise ValueError(f"QAT bitwidth must be in [1, 8] or 32, got {cfg.bits}")
    shape, classes = _input_meta(data)
    if init is None:
        model = build_model(arch, shape, classes, cfg.bits, cfg.seed, cfg.width)
    else:
        model = attach_quantizers(init.copy(), cfg.bits)
    if cfg.bits != 32:
        calibrate_model(model, data.images[:calib_size], calib_method, train_stats=init is None)
    _fit(model, data, cfg, lambda i: QUANTIZED, train_log=train_log, tag=f"{arch}-{cfg.bits}")
    return model


def finetune_qaa(pretrained_qnn: LayerGraph, data, cfg: TrainConfig, checkpoints: CheckpointCollection | None = None,
                 num_checkpoints: int = 8, train_log: TrainLog | None = None) -> LayerGraph:
    """Alternate full-precision and quantized activations batch by batch, weights always quantized.

    Activation quantizer parameters only receive updates on quantized-activation batches.
    """
    if not pretrained_qnn.has_activation_quant() or not pretrained_qnn.has_weight_quant():
        raise ValueError("QAA fine-tuning needs a QNN with weight and activation quantizer sites")
    model = pretrained_qnn.copy()
    n_batches = cfg.epochs * -(-len(data.labels) // cfg.batch_size)
    schedule = qaa_states(n_batches, "qat")

    def keep(state, key):
        return state.activations or key.split(".", 1)[1] not in ACT_KEYS

    every = max(n_batches // num_checkpoints, 1) if checkpoints is not None else None
    _fit(model, data, cfg, lambda i: schedule[i], keep_keys=keep, checkpoints=checkpoints,
         checkpoint_every=every, train_log=train_log, tag=f"{model.arch_id}-qaa")
    return model


def ptq_quantize(model32: LayerGraph, calib, bits: int, method: str = "minmax", calib_size: int = 256) -> LayerGraph:
    """Attach calibrated quantizers to a trained model without touching its weights."""
    if method not in ("minmax", "mse"):
        raise ValueError(f"unknown calibration method {method!r}")
    images = calib.images if hasattr(calib, "images") else np.asarray(calib)
    images = images[:calib_size]
    if len(images) == 0:
        raise ValueError("empty calibration set")
    model = attach_quantizers(model32.copy(), bits)
    if bits == 32:
        return model
    for layer in model.layers:
        if layer.weight_qp is not None:
            qp = (calibrate_minmax if method == "minmax" else calibrate_mse)(layer.params["weight"], bits, True)
            layer.weight_qp.scale, layer.weight_qp.bias = qp.scale, qp.bias
    return calibrate_model(model, images, method, weights=False)


def adv_train(arch: str, data, cfg: TrainConfig, attack: AttackSpec, train_log: TrainLog | None = None) -> LayerGraph:
    """PGD adversarial training: every batch is replaced by its PGD perturbation."""
    if attack.family != "pgd":
        raise ValueError("adversarial training uses PGD")
    shape, classes = _input_meta(data)
    model = build_model(arch, shape, classes, 32, cfg.seed, cfg.width)

    def perturb(m, xb, yb, state):
        return pgd(m, xb, yb, attack, state).x_adv

    _fit(model, data, cfg, lambda i: FULL, perturb=perturb, train_log=train_log, tag=f"{arch}-adv")
    return model


def weight_hash(model: LayerGraph) -> str:
    h = hashlib.sha256()
    for key, arr in model.named_parameters():
        h.update(key.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    for key, qp in model.quant_sites():
        h.update(json.dumps([key, qp.to_dict()], sort_keys=True).encode())
    return h.hexdigest()


def accuracy(model: LayerGraph, images, labels, state: QuantState | None = None, batch_size: int = 512) -> float:
    state = state if state is not None else model.native_state()
    correct = 0
    for s in range(0, len(labels), batch_size):
        logits = model.forward(images[s:s + batch_size], state).logits
        correct += int((logits.argmax(1) == labels[s:s + batch_size]).sum())
    return 100.0 * correct / len(labels)


def predict(model: LayerGraph, images, state: QuantState | None = None, batch_size: int = 512) -> np.ndarray:
    state = state if state is not None else model.native_state()
    return np.concatenate([model.forward(images[s:s + batch_size], state).logits.argmax(1)
                           for s in range(0, len(images), batch_size)])
