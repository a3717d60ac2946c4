"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

import numpy as np


class SGDMomentum:
    """v <- m v + (g + wd w);  w <- w - lr v.  Frozen parameters are skipped."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0005):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        m, wd = self.momentum, self.weight_decay
        for p in self.params:
            if not p.trainable:
                continue
            v = self.velocity[p.name]
            if v.shape != p.value.shape or p.grad.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            v *= m
            v += p.grad + wd * p.value
            p.value -= (lr * v).astype(p.value.dtype, copy=False)
