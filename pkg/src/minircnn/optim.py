"""Plain SGD with momentum and optional decoupled-style weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class SgdConfig:
    """Update rule: v <- momentum*v + grad + weight_decay*theta; theta -= lr*v."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def sgd_step(params: dict[str, Tensor], state: dict[str, np.ndarray],
             cfg: SgdConfig) -> None:
    """Apply one SGD update in place, reading each parameter's ``grad``.

    ``state`` maps parameter names to velocity buffers and is created lazily;
    parameters whose grad is ``None`` are treated as having zero gradient
    (they still move under weight decay and momentum).
    """
    for name, p in params.items():
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state[name] = v
        v *= cfg.momentum
        if p.grad is not None:
            v += p.grad
        if cfg.weight_decay:
            v += cfg.weight_decay * p.data
        p.data -= cfg.learning_rate * v
