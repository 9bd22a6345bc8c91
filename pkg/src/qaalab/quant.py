"""Uniform affine fake quantization with straight-through surrogate gradients.

A quantizer site maps a real tensor onto the integer grid ``round((x - b) / s)``
clamped to ``[0, 2^q - 1]`` (unsigned) or ``[-2^(q-1), 2^(q-1) - 1]`` (signed)
and back again with ``s * k + b``.  All arithmetic runs in float64 and the
result is cast back to the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FULL_PRECISION_BITS = 32
SCALE_FLOOR = 1e-8


class QuantParamError(ValueError):
    pass


@dataclass
class QuantParams:
    """Per-tensor quantization parameters.

    ``bits == 32`` is the pass-through sentinel: every operation is identity.
    """

    bits: int
    scale: float = 1.0
    bias: float = 0.0
    signed: bool = False

    def __post_init__(self):
        self.bits = int(self.bits)
        if not (1 <= self.bits <= 8 or self.bits == FULL_PRECISION_BITS):
            raise QuantParamError(f"bitwidth must be in [1, 8] or 32, got {self.bits}")
        self.scale = max(float(self.scale), SCALE_FLOOR)
        self.bias = float(self.bias)
        if not np.isfinite(self.scale) or not np.isfinite(self.bias):
            raise QuantParamError("scale and bias must be finite")

    @property
    def passthrough(self) -> bool:
        return self.bits == FULL_PRECISION_BITS

    @property
    def grid(self) -> tuple[int, int]:
        if self.signed:
            return -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        return 0, 2**self.bits - 1

    def copy(self) -> "QuantParams":
        return QuantParams(self.bits, self.scale, self.bias, self.signed)

    def to_dict(self) -> dict:
        return {"bits": int(self.bits), "scale": float(self.scale), "bias": float(self.bias), "signed": bool(self.signed)}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(d["bits"], d["scale"], d["bias"], d["signed"])


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (exact for all finite inputs)."""
    t = np.trunc(v)
    frac = v - t
    return t + np.sign(v) * (np.abs(frac) >= 0.5)


def _normalized(x, p: QuantParams) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - p.bias) / p.scale


def quantize(x, p: QuantParams) -> np.ndarray:
    """Integer grid codes of ``x``; returns ``x`` untouched for the 32-bit sentinel."""
    if p.passthrough:
        return x
    lo, hi = p.grid
    return np.clip(round_half_away(_normalized(x, p)), lo, hi).astype(np.int32)


def fake_quantize(x, p: QuantParams) -> np.ndarray:
    if p.passthrough:
        return x
    x = np.asarray(x)
    out = p.scale * quantize(x, p).astype(np.float64) + p.bias
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return out.astype(dtype, copy=False)


def ste_backward(grad_out, x, p: QuantParams):
    """Surrogate gradients of ``fake_quantize`` w.r.t. ``(x, scale, bias)``.

    Inside the grid range the rounding is treated as identity for ``x`` and the
    scale receives ``round(v) - v``; outside, the clamped output is
    ``s * endpoint + b`` and is differentiated exactly.
    """
    grad_out = np.asarray(grad_out)
    if p.passthrough:
        return grad_out, 0.0, 0.0
    lo, hi = p.grid
    v = _normalized(x, p)
    g = grad_out.astype(np.float64)
    below = v < lo
    above = v > hi
    inside = ~(below | above)
    grad_x = np.where(inside, g, 0.0).astype(grad_out.dtype, copy=False)
    ds = np.where(inside, round_half_away(v) - v, np.where(below, lo, hi))
    grad_s = float(np.sum(g * ds))
    grad_b = float(np.sum(np.where(inside, 0.0, g)))
    return grad_x, grad_s, grad_b


def calibrate_minmax(samples, bits: int, signed: bool) -> QuantParams:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise QuantParamError("cannot calibrate on an empty sample set")
    if bits == FULL_PRECISION_BITS:
        return QuantParams(bits, 1.0, 0.0, signed)
    levels = 2**bits - 1
    if signed:
        m = float(np.max(np.abs(samples)))
        return QuantParams(bits, 2.0 * m / levels, 0.0, True)
    lo, hi = float(samples.min()), float(samples.max())
    return QuantParams(bits, (hi - lo) / levels, lo, False)


def quantization_mse(samples, p: QuantParams) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    return float(np.mean((fake_quantize(samples, p) - samples) ** 2))


def calibrate_mse(samples, bits: int, signed: bool, grid_size: int = 11) -> QuantParams:
    """Grid search over (scale, bias) minimizing mean squared fake-quantization error.

    Scales span 0.2x to 1.2x the min-max scale, biases span the sample range.
    The min-max result is the incumbent; a grid candidate replaces it only
    with strictly lower error, and the first minimum in (scale ascending,
    bias ascending) order wins.
    """
    if grid_size < 2:
        raise QuantParamError("grid_size must be >= 2")
    samples = np.asarray(samples, dtype=np.float64).ravel()
    base = calibrate_minmax(samples, bits, signed)
    if base.passthrough:
        return base
    lo, hi = float(samples.min()), float(samples.max())
    if lo == hi:
        return base
    # (0.2 * (g-1) + i) / (g-1) keeps the 1.0 ratio exact whenever it is on the grid
    ratios = (0.2 * (grid_size - 1) + np.arange(grid_size)) / (grid_size - 1)
    scales = np.maximum(ratios * base.scale, SCALE_FLOOR)
    biases = np.linspace(lo, hi, grid_size)
    qlo, qhi = base.grid
    # the min-max candidate competes too, so the search never does worse than it
    best, best_err = base, quantization_mse(samples, base)
    for s in scales:
        for b in biases:
            v = (samples - b) / s
            rec = s * np.clip(round_half_away(v), qlo, qhi) + b
            err = float(np.mean((rec - samples) ** 2))
            if err < best_err:
                best_err = err
                best = QuantParams(bits, float(s), float(b), signed)
    return best
