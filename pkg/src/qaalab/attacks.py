"""l-infinity attacks: PGD, MIM, the state-alternating QAA attack and ensemble baselines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core.graph import LayerGraph, cross_entropy, input_gradient, log_softmax
from .core.tensor import FULL, QuantState

FAMILIES = ("pgd", "mim", "qaa", "ensemble")
ENSEMBLE_MODES = ("logits", "softmax", "sampling")


class AttackError(ValueError):
    pass


@dataclass
class AttackSpec:
    family: str = "mim"
    epsilon: float = 16 / 255
    iterations: int = 10
    step_size: float | None = None
    momentum_decay: float = 1.0
    ensemble_mode: str | None = None
    seed: int = 0
    inner: str = "mim"
    variant: str = "qat"
    random_start: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise AttackError(f"unknown attack family {self.family!r}")
        if not 0 <= self.epsilon <= 1:
            raise AttackError("epsilon must lie in [0, 1]")
        if self.iterations < 1:
            raise AttackError("iterations must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise AttackError("step size must be positive")
        if self.inner not in ("pgd", "mim"):
            raise AttackError(f"unknown inner update {self.inner!r}")
        if self.family == "ensemble" and self.ensemble_mode not in ENSEMBLE_MODES:
            raise AttackError(f"ensemble_mode must be one of {ENSEMBLE_MODES}")
        if self.variant not in ("qat", "ptq"):
            raise AttackError(f"unknown QAA variant {self.variant!r}")

    @property
    def update_rule(self) -> str:
        return self.family if self.family in ("pgd", "mim") else self.inner

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        base = self.epsilon / self.iterations
        return base * 2.5 if self.update_rule == "pgd" else base

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)


@dataclass
class AdversarialSet:
    x: np.ndarray
    y: np.ndarray
    x_adv: np.ndarray
    loss_trace: np.ndarray  # [n, iterations + 1]
    spec: AttackSpec | None = None
    meta: dict = field(default_factory=dict)

    def max_perturbation(self) -> float:
        return float(np.max(np.abs(self.x_adv.astype(np.float64) - self.x))) if self.x.size else 0.0


# oracle(iteration, x) -> (per-example losses, gradient of summed loss w.r.t. x)
Oracle = Callable[[int, np.ndarray], tuple]


def _iterate(oracle: Oracle, x, y, spec: AttackSpec, rule: str, meta: dict | None = None) -> AdversarialSet:
    x0 = np.ascontiguousarray(x, dtype=np.float32)
    y = np.asarray(y)
    eps = np.float32(spec.epsilon)
    alpha = np.float32(spec.alpha)
    lo = np.maximum(x0 - eps, np.float32(0))
    hi = np.minimum(x0 + eps, np.float32(1))
    x_adv = x0.copy()
    if spec.random_start and spec.epsilon > 0:
        rng = np.random.default_rng(spec.seed)
        x_adv = np.clip(x0 + rng.uniform(-eps, eps, x0.shape).astype(np.float32), lo, hi)
    axes = tuple(range(1, x0.ndim))
    momentum = np.zeros_like(x0)
    mu = np.float32(spec.momentum_decay)
    trace, zero_steps = [], np.zeros(len(x0), dtype=np.int64)
    for it in range(spec.iterations):
        losses, grad = oracle(it, x_adv)
        grad = grad.astype(np.float32, copy=False)
        trace.append(losses)
        zero = ~np.any(grad != 0, axis=axes)
        zero_steps += zero
        if rule == "mim":
            l1 = np.abs(grad).sum(axis=axes, keepdims=True)
            normed = np.where(l1 > 0, grad / np.where(l1 > 0, l1, 1), grad)
            momentum = mu * momentum + normed
            direction = np.sign(momentum)
        else:
            direction = np.sign(grad)
        x_adv = np.clip(x_adv + alpha * direction, lo, hi)
    final, _ = oracle(spec.iterations, x_adv)
    trace.append(final)
    meta = dict(meta or {})
    meta["zero_gradient_steps"] = zero_steps.tolist()
    return AdversarialSet(x0, y, x_adv, np.stack(trace, axis=1), spec, meta)


def _state_oracle(model: LayerGraph, y, state_at: Callable[[int], QuantState]) -> Oracle:
    def oracle(it, xa):
        return input_gradient(model, xa, y, state_at(it))
    return oracle


def _require_eval_ready(model: LayerGraph, state: QuantState):
    if not model.supports(state):
        raise AttackError(f"model {model.arch_id} cannot run in state {state.label()}")


def pgd(substitute: LayerGraph, x, y, spec: AttackSpec, state: QuantState = FULL) -> AdversarialSet:
    """Untargeted sign-gradient ascent projected onto the eps-ball and the [0, 1] box."""
    _require_eval_ready(substitute, state)
    return _iterate(_state_oracle(substitute, y, lambda it: state), x, y, spec, "pgd",
                    {"states": [state.label()] * spec.iterations})


def mim(substitute: LayerGraph, x, y, spec: AttackSpec, state: QuantState = FULL) -> AdversarialSet:
    """Momentum iterative method: accumulate L1-normalized gradients, step along their sign."""
    _require_eval_ready(substitute, state)
    return _iterate(_state_oracle(substitute, y, lambda it: state), x, y, spec, "mim",
                    {"states": [state.label()] * spec.iterations})


def qaa_states(iterations: int, variant: str = "qat") -> list[QuantState]:
    """Per-iteration (or per-batch) quantization states.

    The flag starts true and is flipped before every use, so the first entry
    runs full-precision activations.  The QAT variant keeps weights quantized;
    the PTQ variant switches weights together with activations.
    """
    use_act_quant = True
    states = []
    for _ in range(iterations):
        use_act_quant = not use_act_quant
        weights = True if variant == "qat" else use_act_quant
        states.append(QuantState(weights, use_act_quant))
    return states


def qaa_attack(model: LayerGraph, x, y, spec: AttackSpec, variant: str | None = None) -> AdversarialSet:
    variant = variant or spec.variant
    if variant not in ("qat", "ptq"):
        raise AttackError(f"unknown QAA variant {variant!r}")
    if not (model.has_weight_quant() and model.has_activation_quant()):
        raise AttackError(f"model {model.arch_id} lacks the quantizer sites QAA alternates over")
    states = qaa_states(spec.iterations + 1, variant)
    return _iterate(_state_oracle(model, y, lambda it: states[it]), x, y, spec, spec.inner,
                    {"states": [s.label() for s in states[:spec.iterations]], "variant": variant})


def _members(models) -> list[tuple[LayerGraph, QuantState]]:
    out = []
    for m in models:
        if isinstance(m, LayerGraph):
            out.append((m, m.native_state()))
        else:
            model, state = m
            out.append((model, state if state is not None else model.native_state()))
    return out


def ensemble_gradient(members: Sequence[tuple[LayerGraph, QuantState]], x, y, mode: str):
    """Per-example ensemble loss and its input gradient for the logits/softmax modes."""
    y = np.asarray(y)
    n = len(y)
    M = len(members)
    fwds = [m.forward(x, s, False, keep_cache=True) for m, s in members]
    if mode == "logits":
        zbar = sum(f.logits for f in fwds) / M
        losses, d = cross_entropy(zbar, y, reduction="none")
        dls = [d / M] * M
    elif mode == "softmax":
        probs = [np.exp(log_softmax(f.logits)) for f in fwds]
        pbar = sum(probs) / M
        py = pbar[np.arange(n), y]
        losses = -np.log(py)
        dls = []
        for p in probs:
            onehot = np.zeros_like(p)
            onehot[np.arange(n), y] = 1
            w = (p[np.arange(n), y] / (M * py))[:, None]
            dls.append(w * (p - onehot))
    else:
        raise AttackError(f"mode {mode!r} has no joint gradient")
    grad = None
    for (m, _), f, dl in zip(members, fwds, dls):
        dx, _ = m.backward(f, dl)
        grad = dx if grad is None else grad + dx
    return losses, grad


def ensemble_attack(models, x, y, spec: AttackSpec) -> AdversarialSet:
    """Attack an ensemble of substitutes.

    ``models`` holds LayerGraphs (run in their native state) or
    ``(model, state)`` pairs; a CheckpointCollection is accepted for the
    sampling mode and is then sampled without repetition until exhausted.
    """
    from .training import CheckpointCollection

    without_replacement = isinstance(models, CheckpointCollection)
    members = _members(list(models))
    if not members:
        raise AttackError("ensemble needs at least one model")
    mode = spec.ensemble_mode or "logits"
    if len(members) == 1:
        m, s = members[0]
        base = mim if spec.update_rule == "mim" else pgd
        adv = base(m, x, y, spec, s)
        adv.meta["model_sequence"] = [0] * spec.iterations
        return adv
    if mode == "sampling":
        seq = sampling_sequence(len(members), spec.iterations + 1, spec.seed, without_replacement)

        def oracle(it, xa):
            m, s = members[seq[it]]
            return input_gradient(m, xa, y, s)
        meta = {"model_sequence": seq[:spec.iterations]}
    else:
        def oracle(it, xa):
            return ensemble_gradient(members, xa, y, mode)
        meta = {"model_sequence": list(range(len(members)))}
    return _iterate(oracle, x, y, spec, spec.update_rule, meta)


def sampling_sequence(num_models: int, length: int, seed: int, without_replacement: bool = False) -> list[int]:
    rng = np.random.default_rng(seed)
    if not without_replacement:
        return [int(i) for i in rng.integers(0, num_models, size=length)]
    seq: list[int] = []
    while len(seq) < length:
        seq.extend(int(i) for i in rng.permutation(num_models))
    return seq[:length]


def run_attack(spec: AttackSpec, substitute, x, y, state: QuantState | None = None) -> AdversarialSet:
    """Dispatch on ``spec.family``; ``substitute`` is a model or, for ensembles, a model list."""
    if spec.family == "ensemble":
        return ensemble_attack(substitute, x, y, spec)
    if spec.family == "qaa":
        return qaa_attack(substitute, x, y, spec)
    state = state if state is not None else substitute.native_state()
    return (pgd if spec.family == "pgd" else mim)(substitute, x, y, spec, state)
