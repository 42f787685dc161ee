"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumericsError, Tape, Tensor, backward_accumulate


def numeric_grad(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(x.copy())).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"grad_check: non-finite evaluation at coordinate {np.unravel_index(i, x.shape)}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    with Tape():
        y = f(x)
        if y.size != 1:
            raise NumericsError(f"grad_check: function must be scalar-valued, got shape {y.shape}")
        if not y.requires_grad:
            return np.zeros_like(x.data)
        grads = backward_accumulate(y)
    return grads[x]


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12)."""
    point = np.asarray(point, dtype=np.float64)
    a = analytic_grad(f, point)
    n = numeric_grad(f, point, h)
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise NumericsError(f"grad_check: non-finite analytic gradient at coordinate {tuple(bad)}")
    err = np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)
    return float(err.max()) if err.size else 0.0
