"""SGD with Nesterov momentum and decoupled-from-nothing L2 weight decay.

Update rule, applied per parameter p with gradient g, velocity v,
learning rate lr, momentum mu and weight decay wd:

    g' = g + wd * p
    v  = mu * v - lr * g'
    p  = p + mu * v - lr * g'

With mu = 0 this reduces to plain SGD (p -= lr * g').  Velocities are
allocated lazily and stay shape-congruent with their parameters.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractViolation, Tensor


class SGD:
    """Optimizer over named parameter groups with per-group learning rates.

    ``groups`` is a list of dicts: {"params": {name: Tensor}, "lr": float}.
    ``step`` consumes the current ``grad`` buffers; callers zero them.
    """

    def __init__(self, groups, momentum: float = 0.9,
                 weight_decay: float = 0.0005, nesterov: bool = True):
        self.groups = [{"params": dict(g["params"]), "lr": float(g["lr"])} for g in groups]
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.nesterov = bool(nesterov)
        self._velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group["params"].values():
                p.zero_grad()

    def scale_lr(self, factor: float) -> None:
        """Multiply every group's learning rate (used for step decay)."""
        for group in self.groups:
            group["lr"] *= factor

    def step(self) -> None:
        mu = self.momentum
        wd = self.weight_decay
        for group in self.groups:
            lr = group["lr"]
            for name, p in group["params"].items():
                if p.grad is None:
                    raise ContractViolation(f"parameter {name!r} has no gradient")
                g = p.grad + wd * p.data if wd else p.grad
                v = self._velocity.get(id(p))
                if v is None:
                    v = np.zeros_like(p.data)
                    self._velocity[id(p)] = v
                v *= mu
                v -= lr * g
                if self.nesterov:
                    p.data += mu * v - lr * g
                else:
                    p.data += v

    def parameters(self):
        for group in self.groups:
            yield from group["params"].items()
