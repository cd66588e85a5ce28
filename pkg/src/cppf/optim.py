from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class SGD:
    """SGD with heavy-ball momentum; the learning rate is passed per step."""

    def __init__(self, params: list[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - lr * v


def lr_schedule(epoch: int, epochs: int, base_lr: float, warmup_epochs: int = 0, floor: float | None = None) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``floor`` at the last epoch."""
    if floor is None:
        floor = base_lr / 100
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    span = epochs - 1 - warmup_epochs
    if span <= 0:
        return floor
    progress = min(1.0, (epoch - warmup_epochs) / span)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))
