"""Array conventions, quantization state and error types shared by the engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STORAGE_DTYPE = np.float32
CHECK_DTYPE = np.float64


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeError(EngineError, ValueError):
    def __init__(self, layer: str, expected, got):
        super().__init__(f"shape mismatch at layer {layer}: expected {expected}, got {tuple(got)}")
        self.layer = layer
        self.expected = expected
        self.got = tuple(got)


class NumericFault(EngineError, FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite values produced at {where}")
        self.where = where


def check_finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericFault(where)
    return a


def as_tensor(x, dtype=STORAGE_DTYPE) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=dtype)
    return check_finite(a, "input")


@dataclass(frozen=True)
class QuantState:
    """Which sites run quantized during a forward pass."""

    weights: bool = False
    activations: bool = False

    def label(self) -> str:
        return f"w{'Q' if self.weights else 'F'}a{'Q' if self.activations else 'F'}"


FULL = QuantState(False, False)
QUANTIZED = QuantState(True, True)
WEIGHTS_ONLY = QuantState(True, False)
