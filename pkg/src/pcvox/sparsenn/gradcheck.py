"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Variable, backward


def numeric_grad(f: Callable[[], Variable], v: Variable, h: float = 1e-3) -> np.ndarray:
    """``(f(x+h) - f(x-h)) / 2h`` for every element of ``v``; ``f`` re-runs the forward."""
    grad = np.zeros(v.data.shape, dtype=np.float64)
    flat = v.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(f().data)
        flat[i] = old - h
        down = float(f().data)
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(f: Callable[[], Variable], variables: Sequence[Variable]):
    for v in variables:
        v.grad = None
        v.requires_grad = True
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    return [np.zeros(v.data.shape) if v.grad is None else v.grad for v in variables]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)`` in the Euclidean norm."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(f: Callable[[], Variable], variables: Sequence[Variable],
                    h: float = 1e-3) -> float:
    """Relative error between backward and central differences.

    The error is taken over all variables' gradients stacked into one vector,
    so a variable whose true gradient is exactly zero does not turn rounding
    noise into a large ratio. Variables must hold float64 data.
    """
    for v in variables:
        if v.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 variables")
    analytic = analytic_grads(f, variables)
    numeric = [numeric_grad(f, v, h) for v in variables]
    return relative_error(np.concatenate([a.ravel() for a in analytic]),
                          np.concatenate([n.ravel() for n in numeric]))
