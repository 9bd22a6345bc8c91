"""Central finite-difference gradient checks in 64-bit mode."""

from __future__ import annotations

import numpy as np

from .graph import LayerGraph
from .tensor import CHECK_DTYPE, FULL


class QuantizerInFragment(ValueError):
    pass


def _projection_head(num_outputs: int, seed: int):
    r = np.random.default_rng(seed).standard_normal(num_outputs)

    def head(logits, y=None):
        return float(np.sum(logits * r)), np.broadcast_to(r, logits.shape).copy()
    return head


# gradients below this magnitude are compared absolutely; finite differences
# carry ~1e-11 of rounding noise, so exact zeros would otherwise read as error 1
ABS_FLOOR = 1e-6


def _rel(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)


def grad_check(fragment: LayerGraph, point, step: float = 1e-5, train: bool = False,
               params: bool = True, head=None, y=None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``head(logits, y)``; by default a fixed random
    projection of the outputs.  Coordinates cover the input and, with
    ``params=True``, every trainable parameter.  Runs on a float64 copy.
    """
    for key, qp in fragment.quant_sites():
        if not qp.passthrough:
            raise QuantizerInFragment(
                f"site {key} quantizes to {qp.bits} bits; straight-through gradients are not "
                "finite-difference consistent")
    model = fragment.astype(CHECK_DTYPE)
    x = np.array(point, dtype=CHECK_DTYPE)
    head = head or _projection_head(model.num_classes, seed)

    def objective(xx, m):
        # train-mode BN would mutate running stats; evaluate on a throwaway copy
        mm = m.copy() if train else m
        return head(mm.forward(xx, FULL, train).logits, y)[0]

    run = model.copy() if train else model
    fwd = run.forward(x, FULL, train, keep_cache=True)
    _, dlogits = head(fwd.logits, y)
    dx, grads = run.backward(fwd, dlogits)

    worst = 0.0
    num = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = objective(x, model)
        flat[i] = orig - step
        fm = objective(x, model)
        flat[i] = orig
        num.reshape(-1)[i] = (fp - fm) / (2 * step)
    worst = max(worst, float(np.max(_rel(dx, num))))

    if params:
        for key, arr in list(model.named_parameters()):
            g = np.asarray(grads[key])
            numg = np.zeros_like(arr)
            pf = arr.reshape(-1)
            for i in range(pf.size):
                orig = pf[i]
                pf[i] = orig + step
                fp = objective(x, model)
                pf[i] = orig - step
                fm = objective(x, model)
                pf[i] = orig
                numg.reshape(-1)[i] = (fp - fm) / (2 * step)
            worst = max(worst, float(np.max(_rel(g, numg))))
    return worst
