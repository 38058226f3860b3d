"""AdamW with decoupled weight decay and a warmup-cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import MissingGradient
from .numerics import ParamSet


def lr_at(step: int, warmup_steps: int, total_steps: int, max_lr: float) -> float:
    """Linear warmup to max_lr, then cosine decay to zero."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return max_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay applied before the bias-corrected Adam update."""

    def __init__(
        self,
        params: ParamSet,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: float, grad_clip: float | None = None) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                raise MissingGradient(f"parameter {name} has no gradient")
        self.t += 1
        if grad_clip is not None:
            total = math.sqrt(
                sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                    for _, t in self.params.items())
            )
            scale = grad_clip / total if total > grad_clip else 1.0
        else:
            scale = 1.0
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, t in self.params.items():
            g = t.grad * scale if scale != 1.0 else t.grad
            if self.weight_decay:
                t.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            t.data -= (lr * update).astype(t.data.dtype)
