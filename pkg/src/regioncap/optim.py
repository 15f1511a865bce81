"""Decoupled weight-decay optimizer with linear warmup and cosine decay."""
from __future__ import annotations

import math

import numpy as np


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict.

    The schedule is linear warmup over the first ``warmup_frac`` of
    ``total_steps`` followed by cosine decay to zero.
    """

    def __init__(self, params: dict, lr: float, total_steps: int,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, warmup_frac: float = 0.05):
        self.params = dict(params)
        for name, p in self.params.items():
            if not p.requires_grad:
                raise ValueError(f"optimizer given frozen parameter {name!r}")
        self.lr = lr
        self.total_steps = max(1, int(total_steps))
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = max(1, int(math.ceil(warmup_frac * self.total_steps)))
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def lr_at(self, t: int) -> float:
        if t <= self.warmup_steps:
            return self.lr * t / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        frac = min(1.0, (t - self.warmup_steps) / span)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        lr_t = self.lr_at(self.t)
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr_t * (update + self.weight_decay * p.data)

    def state_dict(self) -> dict:
        state = {"t": self.t}
        for name in self.params:
            state[f"m/{name}"] = self.m[name].copy()
            state[f"v/{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for name in self.params:
            self.m[name] = state[f"m/{name}"].copy()
            self.v[name] = state[f"v/{name}"].copy()
