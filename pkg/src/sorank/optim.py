"""SGD with momentum, linear warm-up, and a multi-step decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    """A parameter reached the optimizer without a populated gradient."""


@dataclass
class SgdState:
    base_lr: float = 1e-2
    momentum: float = 0.9
    warmup_iters: int = 200
    milestones: list[int] = field(default_factory=list)
    decay: float = 0.1
    iter: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.milestones[1:], self.milestones)):
            raise ValueError("milestones must be strictly increasing")

    def effective_lr(self) -> float:
        warm = 1.0 if self.warmup_iters <= 0 else min(
            1.0, (self.iter + 1) / self.warmup_iters)
        n_passed = sum(1 for m in self.milestones if m <= self.iter)
        return self.base_lr * warm * self.decay ** n_passed


def sgd_step(state: SgdState, params: list[tuple[str, Tensor]],
             require_grads: bool = True) -> float:
    """One update: v = momentum*v + g; p -= lr*v. Returns the lr used."""
    lr = state.effective_lr()
    for name, p in params:
        if p.grad is None:
            if require_grads:
                raise MissingGradError(f"parameter {name!r} has no gradient")
            continue
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + p.grad
        state.velocity[name] = v
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
    state.iter += 1
    return lr
