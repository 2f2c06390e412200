"""AdamW with decoupled weight decay and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError
from .nn import ParamStore

__all__ = ["OptimizerConfig", "cosine_lr", "adamw_step"]


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate_max: float = 3e-4
    learning_rate_min: float = 1e-6
    total_steps: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not (0 < self.learning_rate_min <= self.learning_rate_max):
            raise ArgumentError(
                f"need 0 < lr_min <= lr_max, got {self.learning_rate_min}, {self.learning_rate_max}"
            )
        if not all(0 <= b < 1 for b in self.betas):
            raise ArgumentError(f"betas must lie in [0, 1), got {self.betas}")
        if self.total_steps < 1:
            raise ArgumentError(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(step: int, config: OptimizerConfig) -> float:
    """Annealed rate ``lr_min + (lr_max - lr_min) (1 + cos(pi step / T)) / 2``."""
    if not 0 <= step <= config.total_steps:
        raise ArgumentError(f"step {step} outside [0, {config.total_steps}]")
    span = config.learning_rate_max - config.learning_rate_min
    return config.learning_rate_min + 0.5 * span * (1.0 + math.cos(math.pi * step / config.total_steps))


def adamw_step(params: ParamStore, gradients, config: OptimizerConfig, step: int, lr_scale=1.0):
    """One in-place AdamW update over every parameter in the store.

    Standard moment updates with bias correction, then the decoupled decay
    ``theta <- theta - lr * wd * theta``.  The learning rate follows the
    cosine schedule at ``step`` (clamped to the schedule horizon), times
    ``lr_scale`` for parameter groups that train slower.
    """
    if step < 1:
        raise ArgumentError(f"step must be >= 1, got {step}")
    lr = cosine_lr(min(step, config.total_steps), config) * lr_scale
    b1, b2 = config.betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, theta in params.items():
        g = gradients[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r}: shape {g.shape} vs {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m, v = params.moments(name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= (lr / c1) * m / (np.sqrt(v / c2) + config.epsilon)
        if config.weight_decay:
            theta -= lr * config.weight_decay * theta
    params.step = step
    return params
