"""AdamW with a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamWState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamWState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0)


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> AdamWState:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adamw_step: params, grads and state lengths differ")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adamw_step: state shape {m.shape} does not match param {p.shape}")
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise ShapeError(f"adamw_step: grad shape {g.shape} does not match param {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= lr * update
    return state


@dataclass(frozen=True)
class WarmupCosine:
    warmup_lr: float = 3e-4
    peak_lr: float = 1.2e-3
    warmup_steps: int = 200
    total_steps: int = 2000
    final_lr: float = 0.0

    def __call__(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.warmup_lr + (self.peak_lr - self.warmup_lr) * step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        frac = min(1.0, (step - self.warmup_steps) / span)
        return self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (1.0 + math.cos(math.pi * frac))
