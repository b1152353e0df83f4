"""SGD with momentum and a step-down learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class SGDMomentum:
    lr: float = 0.1
    momentum: float = 0.9
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        self.milestones = tuple(sorted(int(m) for m in self.milestones))

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: divided by 1/gamma at each milestone reached."""
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.gamma ** drops

    def step(self, params: list[tuple[str, np.ndarray]], grads: list[tuple[str, np.ndarray]],
             epoch: int) -> None:
        """In place: v <- momentum * v + g;  p <- p - lr(epoch) * v."""
        lr = self.lr_at(epoch)
        for (name, p), (gname, g) in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"{name}: parameter shape {p.shape} != gradient shape {g.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name}")
        for (name, p), (_, g) in zip(params, grads):
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v *= self.momentum
            v += g
            self.velocity[name] = v
            p -= p.dtype.type(lr) * v
