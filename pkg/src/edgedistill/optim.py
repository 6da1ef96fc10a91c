"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class CosineSchedule:
    base_lr: float
    min_lr: float
    total_epochs: int

    def lr(self, epoch):
        if self.total_epochs <= 1:
            return self.base_lr
        t = min(max(epoch, 0), self.total_epochs - 1) / (self.total_epochs - 1)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + np.cos(np.pi * t))


@dataclass
class ConstantSchedule:
    base_lr: float

    def lr(self, epoch):
        return self.base_lr


@dataclass
class OptimizerState:
    params: list
    schedule: object
    weight_decay: float = 0.0
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]


def adamw_step(state: OptimizerState, epoch: int):
    """One decoupled-weight-decay Adam update; zeroes grads afterwards."""
    for i, p in enumerate(state.params):
        if p.grad is None:
            raise ContractError(f"parameter {i} has no gradient")
    lr = state.schedule.lr(epoch)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + EPS)
        p.data -= lr * (update + state.weight_decay * p.data)
        p.grad = None
    return lr
