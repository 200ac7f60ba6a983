"""SGD with momentum and coupled weight decay, plus learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SGD:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")

    def step(self, named_params):
        """Update ``(name, param, grad)`` triples in place, then zero the grads.

        g = grad + wd * theta;  v = momentum * v + g;  theta -= lr * v
        """
        for name, p, g in named_params:
            if g.shape != p.shape:
                raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            elif v.shape != p.shape:
                raise ValueError(f"{name}: velocity shape {v.shape} != param shape {p.shape}")
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p
            p -= self.lr * v
            g[...] = 0.0


def lr_schedule(epoch: int, base_lr: float, policy: str = "constant", factor: float = 0.1,
                every: int = 10) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if policy == "constant":
        return base_lr
    if policy == "step_decay":
        if every < 1:
            raise ValueError(f"lr_every must be positive, got {every}")
        return base_lr * math.pow(factor, epoch // every)
    raise ValueError(f"unknown lr policy {policy!r}")
