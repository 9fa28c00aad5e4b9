"""Adam and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..errors import TrainingDivergedError
from .autograd import Variable


@dataclass
class AdamState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Variable], grads: Sequence[Optional[np.ndarray]],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place; moments are kept in float64.

    A ``None`` gradient leaves its parameter (and moments) untouched.
    """
    b1, b2 = state.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {p.name or i}")
        m = state.m.setdefault(i, np.zeros(p.data.shape))
        v = state.v.setdefault(i, np.zeros(p.data.shape))
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


class Adam:
    def __init__(self, params: List[Variable], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, betas=tuple(betas), eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def step_decay(base_lr: float, epoch: int, every: int = 5, factor: float = 0.5) -> float:
    """Learning rate for ``epoch`` (0-based): ``base_lr * factor ** (epoch // every)``."""
    return base_lr * factor ** (epoch // every)
