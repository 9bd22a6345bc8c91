"""Transferability diagnostics.

* feature divergence of a target between clean and adversarial inputs,
* input-gradient cosine similarity between two models and the derived
  distance matrix (1 - mean similarity),
* weight-space and feature-space loss sharpness inside an l-infinity box,
* batch-norm running statistics export.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core.graph import LayerGraph, cross_entropy
from .core.tensor import NumericFault, QuantState

log = logging.getLogger(__name__)


class UndefinedDiagnostic(ValueError):
    pass


def _state(model: LayerGraph, state):
    return state if state is not None else model.native_state()


# -- feature divergence ---------------------------------------------------------

def divergence_from_features(clean, adv) -> np.ndarray:
    """Per-example ``||adv - clean||_2 / ||clean||_2``; NaN where the clean feature is zero."""
    clean = np.asarray(clean, dtype=np.float64).reshape(len(clean), -1)
    adv = np.asarray(adv, dtype=np.float64).reshape(len(adv), -1)
    num = np.linalg.norm(adv - clean, axis=1)
    den = np.linalg.norm(clean, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


def feature_divergence_per_example(target: LayerGraph, x, x_adv, tap_k: int, state: QuantState | None = None):
    if not 0 <= tap_k < len(target.taps):
        raise IndexError(f"tap {tap_k} out of range; model has {len(target.taps)} taps")
    if np.shape(x) != np.shape(x_adv):
        raise ValueError("clean and adversarial batches differ in shape")
    state = _state(target, state)
    fc = target.forward(x, state).features[tap_k]
    fa = target.forward(x_adv, state).features[tap_k]
    return divergence_from_features(fc, fa)


def feature_divergence(target: LayerGraph, x, x_adv, tap_k: int, state: QuantState | None = None,
                       skip_undefined: bool = False) -> float:
    """Mean feature divergence at tap ``tap_k``.

    Raises ``UndefinedDiagnostic`` when a clean feature vector is all-zero,
    unless ``skip_undefined`` drops such examples (with a warning).
    """
    d = feature_divergence_per_example(target, x, x_adv, tap_k, state)
    bad = np.isnan(d)
    if bad.any():
        if not skip_undefined or bad.all():
            raise UndefinedDiagnostic(f"zero clean feature at tap {tap_k} for {int(bad.sum())} example(s)")
        log.warning("feature divergence: skipping %d example(s) with zero clean feature", int(bad.sum()))
    return float(np.mean(d[~bad]))


# -- gradient alignment -----------------------------------------------------------

def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedDiagnostic("cosine similarity of a zero gradient is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def per_example_input_gradients(model: LayerGraph, x, y, state=None) -> np.ndarray:
    """Per-example loss gradients w.r.t. the input, flattened.

    ``state`` may be a list of states; the gradient is then that of the loss
    averaged over them (the alternating-state objective).
    """
    total = 0.0
    states = _states(model, state)
    for s in states:
        fwd = model.forward(x, s, False, keep_cache=True)
        _, d = cross_entropy(fwd.logits, y, reduction="none")
        dx, _ = model.backward(fwd, d)
        total = total + dx.reshape(len(dx), -1).astype(np.float64)
    return total / len(states)


def cosine_rows(ga: np.ndarray, gb: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(ga, axis=1)
    nb = np.linalg.norm(gb, axis=1)
    ok = (na > 0) & (nb > 0)
    out = np.full(len(ga), np.nan)
    out[ok] = np.clip(np.einsum("ij,ij->i", ga[ok], gb[ok]) / (na[ok] * nb[ok]), -1.0, 1.0)
    return out


def gradient_similarity(target: LayerGraph, substitute: LayerGraph, x, y, target_state=None,
                        substitute_state=None, skip_undefined: bool = False) -> float:
    """Mean per-example cosine between the input gradients of the two models at the clean point."""
    ga = per_example_input_gradients(target, x, y, target_state)
    gb = per_example_input_gradients(substitute, x, y, substitute_state)
    cos = cosine_rows(ga, gb)
    bad = np.isnan(cos)
    if bad.any():
        if not skip_undefined or bad.all():
            raise UndefinedDiagnostic(f"zero input gradient for {int(bad.sum())} example(s)")
        log.warning("gradient similarity: skipping %d example(s) with zero gradient", int(bad.sum()))
    return float(np.mean(cos[~bad]))


def distance_matrix(models: Sequence, x, y) -> tuple[list[str], np.ndarray]:
    """Pairwise ``1 - mean cosine`` of input gradients.

    ``models`` holds ``(label, model)`` or ``(label, model, state)`` tuples.
    Pairs without any defined per-example cosine become NaN (with a warning).
    """
    if len(models) < 2:
        raise ValueError("distance matrix needs at least two models")
    labels, grads = [], []
    for entry in models:
        label, model = entry[0], entry[1]
        state = entry[2] if len(entry) > 2 else None
        labels.append(label)
        grads.append(per_example_input_gradients(model, x, y, state))
    k = len(models)
    mat = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            cos = cosine_rows(grads[i], grads[j])
            if np.all(np.isnan(cos)):
                log.warning("distance %s-%s undefined: all gradients zero", labels[i], labels[j])
                mat[i, j] = mat[j, i] = np.nan
            else:
                mat[i, j] = mat[j, i] = 1.0 - float(np.nanmean(cos))
    return labels, mat


# -- sharpness --------------------------------------------------------------------

@dataclass
class SharpnessConfig:
    epsilon: float = 5e-4
    iterations: int = 20
    step_fraction: float = 0.25

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class SharpnessResult:
    value: float
    base_loss: float
    extreme_loss: float
    trace: list = field(default_factory=list)


def _states(model, states):
    if states is None:
        return [model.native_state()]
    if isinstance(states, QuantState):
        return [states]
    return list(states)


def _loss_and_grads(model: LayerGraph, x, y, states, head, want: str):
    """Mean (over states) batch loss with gradients w.r.t. the input or the parameters."""
    total, gsum = 0.0, None
    for s in states:
        fwd = model.forward(x, s, False, keep_cache=True)
        loss, dlogits = head(fwd.logits, y)
        if not np.isfinite(loss):
            raise NumericFault("sharpness objective")
        dx, grads = model.backward(fwd, dlogits)
        g = dx if want == "input" else {k: grads[k] for k, _ in model.named_parameters()}
        total += loss
        if gsum is None:
            gsum = g
        elif want == "input":
            gsum = gsum + g
        else:
            gsum = {k: gsum[k] + g[k] for k in gsum}
    return total / len(states), gsum


def _loss(model, x, y, states, head):
    total = 0.0
    for s in states:
        loss, _ = head(model.forward(x, s, False).logits, y)
        if not np.isfinite(loss):
            raise NumericFault("sharpness objective")
        total += loss
    return total / len(states)


def sharpness_weight(model: LayerGraph, x, y, cfg: SharpnessConfig, states=None, head=None) -> SharpnessResult:
    """Relative loss increase (x100) under the worst weight perturbation in the eps-box.

    Sign ascent with step ``step_fraction * eps``; a step that lowers the
    objective is rejected and the step halved, so the trace never decreases.
    """
    head = head or cross_entropy
    states = _states(model, states)
    base = model.copy()
    w0 = {k: v.copy() for k, v in base.named_parameters()}
    eta = {k: np.zeros_like(v) for k, v in w0.items()}
    work = model.copy()
    l0 = _loss(work, x, y, states, head)
    best, step = l0, cfg.step_fraction * cfg.epsilon
    trace = [l0]
    for _ in range(cfg.iterations):
        for k in w0:
            work.set_parameter(k, (w0[k] + eta[k]).astype(w0[k].dtype))
        _, g = _loss_and_grads(work, x, y, states, head, "params")
        cand = {k: np.clip(eta[k] + step * np.sign(g[k]), -cfg.epsilon, cfg.epsilon) for k in eta}
        for k in w0:
            work.set_parameter(k, (w0[k] + cand[k]).astype(w0[k].dtype))
        val = _loss(work, x, y, states, head)
        if val >= best:
            best, eta = val, cand
        else:
            step *= 0.5
        trace.append(best)
    return SharpnessResult(100.0 * (best - l0) / (1.0 + l0), l0, best, trace)


def sharpness_feature(model: LayerGraph, x_adv, y, cfg: SharpnessConfig, states=None, head=None) -> SharpnessResult:
    """Relative loss drop (x100) under the best input perturbation in the eps-box around ``x_adv``."""
    head = head or cross_entropy
    states = _states(model, states)
    x0 = np.asarray(x_adv, dtype=model.dtype)
    l0 = _loss(model, x0, y, states, head)
    best, step = l0, cfg.step_fraction * cfg.epsilon
    eta = np.zeros_like(x0)
    trace = [l0]
    for _ in range(cfg.iterations):
        _, g = _loss_and_grads(model, (x0 + eta).astype(x0.dtype), y, states, head, "input")
        cand = np.clip(eta - step * np.sign(g), -cfg.epsilon, cfg.epsilon)
        val = _loss(model, (x0 + cand).astype(x0.dtype), y, states, head)
        if val <= best:
            best, eta = val, cand
        else:
            step *= 0.5
        trace.append(best)
    return SharpnessResult(100.0 * (l0 - best) / (1.0 + best), l0, best, trace)


# -- batch norm statistics --------------------------------------------------------

def bn_stats_export(model: LayerGraph, layer_index: int) -> list[tuple[int, float, float]]:
    """``(channel, running_mean, running_var)`` rows of a batchnorm layer."""
    layer = model.layers[layer_index]
    if layer.kind != "batchnorm":
        raise ValueError(f"layer {layer_index} is {layer.kind}, not batchnorm")
    rm, rv = layer.buffers["running_mean"], layer.buffers["running_var"]
    return [(c, float(rm[c]), float(rv[c])) for c in range(len(rm))]
