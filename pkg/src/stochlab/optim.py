"""AdamW with linear warm-up followed by cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    warmup_steps: int = 10
    total_steps: int = 200
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Learning rate for 0-based ``step``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    t = min(1.0, (step - cfg.warmup_steps) / span)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamW:
    cfg: OptimConfig
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> float:
        """Apply one update to every parameter holding a gradient; returns the lr used."""
        c = self.cfg
        lr = lr_at(self.step_count, c)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for name, p in params.items():
            g = p.grad
            if g is None or not p.requires_grad:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.weight_decay:
                p.data *= 1.0 - lr * c.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return lr
