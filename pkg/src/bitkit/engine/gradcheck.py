"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between backprop and finite differences over ``inputs``.

    ``fn`` must rebuild the graph from ``inputs`` on every call and return a
    scalar.  Inputs should be float64 with ``requires_grad=True``.
    """
    analytic = backward(fn())
    worst = 0.0
    for x in inputs:
        a = analytic.get(x, np.zeros_like(x.data))
        num = numerical_grad(fn, x, h)
        worst = max(worst, max_relative_error(a, num))
    return worst
