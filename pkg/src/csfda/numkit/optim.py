"""SGD with heavy-ball momentum, coupled weight decay and cosine annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from csfda.errors import MissingGradient
from csfda.numkit.tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    total_steps: int | None = None  # None selects a constant schedule
    step: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.total_steps is not None and self.total_steps <= 0:
            raise ValueError("total_steps must be positive")

    def lr_at(self, j: int) -> float:
        if self.total_steps is None:
            return self.learning_rate
        j = min(j, self.total_steps)
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * j / self.total_steps))

    @property
    def current_lr(self) -> float:
        return self.lr_at(self.step)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None, state: OptimizerState) -> None:
    """One in-place update: v <- m*v + g + wd*theta, theta <- theta - lr(j)*v.

    ``grads`` defaults to each parameter's accumulated ``.grad``.
    """
    lr = state.current_lr
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise MissingGradient(f"no gradient for parameter {name!r}")
        d = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.velocity.get(name)
        v = d.copy() if v is None else state.momentum * v + d
        state.velocity[name] = v
        p.data -= lr * v
    state.step += 1


class SGD:
    """Thin stateful wrapper so training loops read naturally."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, total_steps: int | None = None):
        self.params = dict(params)
        self.state = OptimizerState(lr, momentum, weight_decay, total_steps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, None, self.state)
