"""AdamW with decoupled weight decay and a warmup-then-cosine LR schedule.

Master weights stay binary32 throughout; the optimizer touches only them and
its own moment buffers, never the quantized views.  Decay applies to matrix
parameters only (``ndim >= 2``) — bias vectors, norm gains, and other 1-D
parameters are exempt, following the usual transformer training convention.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

F32 = np.float32

__all__ = ["AdamW", "CosineSchedule"]


@dataclasses.dataclass(frozen=True)
class CosineSchedule:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``floor_lr``.

    ``lr_at(0)`` is 0 when there is a warmup phase, the peak is reached
    exactly at ``warmup_steps``, and the floor exactly at ``total_steps``;
    later steps stay at the floor.
    """

    peak_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if not 0 <= self.floor_lr <= self.peak_lr:
            raise ValueError("floor_lr must lie in [0, peak_lr]")

    def lr_at(self, step: int) -> float:
        step = min(max(step, 0), self.total_steps)
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        if span == 0:
            return self.floor_lr
        frac = (step - self.warmup_steps) / span
        return self.floor_lr + (self.peak_lr - self.floor_lr) * 0.5 * (
            1.0 + math.cos(math.pi * frac)
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CosineSchedule":
        return cls(**d)


class AdamW:
    """Decoupled-decay Adam over a named parameter dict, updated in place.

    ``params`` maps names to float32 arrays that the optimizer will mutate;
    decay is skipped for parameters with fewer than two dimensions.
    """

    def __init__(self, params, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        if weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        self.params = params
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, lr: float) -> None:
        if set(grads) != set(self.params):
            raise KeyError(
                f"gradient keys {sorted(grads)} do not match parameters "
                f"{sorted(self.params)}"
            )
        self.t += 1
        b1, b2 = self.betas
        c1 = F32(1.0 - b1**self.t)
        c2 = F32(1.0 - b2**self.t)
        lr32 = F32(lr)
        eps = F32(self.eps)
        for k, w in self.params.items():
            g = np.asarray(grads[k], dtype=F32)
            m, v = self.m[k], self.v[k]
            m += (F32(1.0 - b1)) * (g - m)
            v += (F32(1.0 - b2)) * (g * g - v)
            update = (m / c1) / (np.sqrt(v / c2) + eps)
            if w.ndim >= 2 and self.weight_decay:
                update = update + F32(self.weight_decay) * w
            w -= lr32 * update

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
