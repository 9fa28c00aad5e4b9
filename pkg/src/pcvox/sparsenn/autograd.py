"""Per-operation reverse-mode differentiation.

Every differentiable op computes its forward value eagerly and, if a tape is
active and any input requires a gradient, records a closure mapping the
output gradient to input gradients. :func:`backward` replays the records in
exact reverse order. Gradients are accumulated in float64 whatever the
forward dtype.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import TrainingDivergedError


class Variable:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Variable{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_STACK: List[Optional["Tape"]] = []


class Tape:
    def __init__(self):
        self.records: List[Tuple[Variable, Tuple[Variable, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()

    def record(self, output: Variable, inputs: Tuple[Variable, ...], fn: BackwardFn) -> None:
        self.records.append((output, inputs, fn))

    def __len__(self):
        return len(self.records)


def current_tape() -> Optional[Tape]:
    return _STACK[-1] if _STACK else None


@contextlib.contextmanager
def no_grad():
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


def result(data: np.ndarray, inputs: Tuple[Variable, ...], fn: BackwardFn) -> Variable:
    """Wrap an op output, recording ``fn`` when a gradient is needed."""
    out = Variable(data)
    tape = current_tape()
    if tape is not None and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        tape.record(out, inputs, fn)
    return out


def backward(tape: Tape, loss: Variable, check_finite: bool = True) -> Dict[Variable, np.ndarray]:
    """Back-propagate from a scalar ``loss``; returns and accumulates leaf gradients.

    Leaf gradients are added to ``Variable.grad``. The tape is cleared.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    grads: Dict[Variable, np.ndarray] = {loss: np.ones(loss.data.shape, dtype=np.float64)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(out, None)
        if g is None:
            continue
        in_grads = fn(g.astype(out.data.dtype, copy=False))
        for v, gi in zip(inputs, in_grads):
            if gi is None or not v.requires_grad:
                continue
            acc = grads.get(v)
            if acc is None:
                grads[v] = np.array(gi, dtype=np.float64)
            else:
                acc += gi
    tape.records.clear()

    leaves = {v: g for v, g in grads.items() if v is not loss or v.requires_grad}
    for v, g in leaves.items():
        if check_finite and not np.all(np.isfinite(g)):
            raise TrainingDivergedError(
                f"non-finite gradient for {v.name or 'unnamed variable'} {v.shape}")
        if v.grad is None:
            v.grad = g
        else:
            v.grad = v.grad + g
    return leaves
