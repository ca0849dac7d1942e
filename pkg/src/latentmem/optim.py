"""AdamW with parameter groups and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def lr_factor(position: float, warmup_ratio: float) -> float:
    """Linear warmup to 1 over ``warmup_ratio``, then cosine decay to 0.

    ``position`` is the fraction of the run already completed, in [0, 1].
    """
    position = min(max(position, 0.0), 1.0)
    if warmup_ratio > 0 and position < warmup_ratio:
        return position / warmup_ratio
    if warmup_ratio >= 1.0:
        return 1.0
    progress = (position - warmup_ratio) / (1.0 - warmup_ratio)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class ParamGroup:
    params: dict[str, Tensor]
    lr_mult: float = 1.0
    weight_decay: float | None = None


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Decoupled weight-decay Adam.

    Effective learning rate = ``lr * lr_factor(position, warmup_ratio) * group.lr_mult``.
    """

    def __init__(self, groups: list[ParamGroup], lr: float, warmup_ratio: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.groups = groups
        self.lr = lr
        self.warmup_ratio = warmup_ratio
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()
        names = [n for g in groups for n in g.params]
        if len(names) != len(set(names)):
            raise ValueError("a parameter is registered in more than one group")
        for g in groups:
            for name, p in g.params.items():
                self.state.m[name] = np.zeros_like(p.data)
                self.state.v[name] = np.zeros_like(p.data)

    def parameters(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params.values()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def current_lr(self, position: float) -> float:
        return self.lr * lr_factor(position, self.warmup_ratio)

    def step(self, position: float) -> float:
        """Apply one update; returns the base learning rate used."""
        for g in self.groups:
            for name, p in g.params.items():
                if p.grad is None:
                    raise ValueError(f"parameter {name!r} has no gradient")
        self.state.step += 1
        t = self.state.step
        lr = self.current_lr(position)
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for g in self.groups:
            glr = lr * g.lr_mult
            wd = self.weight_decay if g.weight_decay is None else g.weight_decay
            for name, p in g.params.items():
                m = self.state.m[name]
                v = self.state.v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * p.grad * p.grad
                if glr == 0.0:
                    continue
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if wd:
                    p.data = p.data - glr * wd * p.data
                p.data = p.data - glr * update
        return lr
