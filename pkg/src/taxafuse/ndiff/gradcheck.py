"""Finite-difference gradient checking.

The numerical side only ever calls the forward function, so it stays
independent of the backward implementation it is used to verify.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(f, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued ``f`` w.r.t. ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f().data)
        flat[i] = orig - h
        f_minus = float(f().data)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Worst-case elementwise relative error with a small denominator floor."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(f, params: list[Tensor], h: float = 1e-5) -> float:
    """Backprop ``f()`` once, then compare against finite differences.

    Returns the worst relative error over all parameters.
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}
    worst = 0.0
    for p in params:
        numeric = numerical_gradient(f, p, h=h)
        worst = max(worst, max_relative_error(analytic[id(p)], numeric))
    for p in params:
        p.grad = None
    return worst
