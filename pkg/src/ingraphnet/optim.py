from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .tensor import Parameter, UsageError


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Iterable[Parameter], cfg: OptimConfig) -> None:
    """One SGD update with heavy-ball momentum and L2 weight decay; zeroes grads.

    Per element: ``v <- m*v + g + wd*theta``, ``theta <- theta - lr*v``.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p.name!r} has no gradient; run backward() first")
    for p in params:
        v = p.momentum_buffer
        v *= cfg.momentum
        v += p.grad.reshape(-1)
        v += cfg.weight_decay * p.data.reshape(-1)
        p.data = p.data - cfg.learning_rate * v.reshape(p.shape)
        p.grad = None


def reset_momentum(params: Iterable[Parameter]) -> None:
    for p in params:
        p.momentum_buffer = np.zeros(p.data.size, dtype=np.float64)
