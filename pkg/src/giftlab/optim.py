"""Adam with coupled L2 weight decay, and the triangular cyclical LR policy."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .nn import Param


@dataclass
class AdamConfig:
    lr: float = 1e-3
    weight_decay: float = 2e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optim.adam betas must lie in [0, 1)")
        if not self.lr > 0:
            raise ConfigError("optim.adam.lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("optim.adam.weight_decay must be >= 0")
        if not self.eps > 0:
            raise ConfigError("optim.adam.eps must be > 0")


@dataclass
class CyclicLrConfig:
    base_lr: float = 1e-8
    max_lr: float = 1e-3
    step_size: int = 500

    def __post_init__(self):
        if not 0 < self.base_lr <= self.max_lr:
            raise ConfigError("optim.cyclic_lr needs 0 < base_lr <= max_lr")
        if not isinstance(self.step_size, int) or self.step_size < 1:
            raise ConfigError("optim.cyclic_lr.step_size must be an integer >= 1")


def lr_at(cfg: CyclicLrConfig, step: int) -> float:
    """Triangular cyclical learning rate at optimizer step ``step``."""
    cycle = math.floor(1 + step / (2 * cfg.step_size))
    x = abs(step / cfg.step_size - 2 * cycle + 1)
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * max(0.0, 1.0 - x)


def adam_step(params: Sequence[Param], cfg: AdamConfig, lr_now: float) -> None:
    """One bias-corrected Adam update of ``params``; their grads are zeroed afterwards.

    Weight decay is added to the gradient before the moment updates.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name}")
    b1, b2 = cfg.beta1, cfg.beta2
    for p in params:
        g = p.grad + cfg.weight_decay * p.value if cfg.weight_decay else p.grad
        p.step_count += 1
        p.adam_m *= b1
        p.adam_m += (1 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1 - b2) * g * g
        m_hat = p.adam_m / (1 - b1 ** p.step_count)
        v_hat = p.adam_v / (1 - b2 ** p.step_count)
        p.value -= lr_now * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p.zero_grad()
