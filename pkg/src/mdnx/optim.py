"""Decoupled weight-decay Adam with a milestone step schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class AdamW:
    def __init__(
        self,
        params: list[Parameter],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data  # decoupled decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class MilestoneSchedule:
    """lr(epoch) = base * gamma^(number of milestones at or before epoch)."""

    def __init__(self, base_lr: float, milestones: tuple[int, ...], gamma: float = 0.1):
        self.base_lr = base_lr
        self.milestones = tuple(sorted(milestones))
        self.gamma = gamma

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.gamma**drops
