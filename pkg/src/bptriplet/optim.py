"""SGD with momentum and the progress-based schedules used during training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({name: np.zeros(t.shape) for name, t in params.items()})


def sgd_momentum_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
    lr_mult: dict[str, float] | None = None,
) -> tuple[ModelParams, OptimizerState]:
    """``v <- momentum * v + g``, ``p <- p - lr * v`` for every parameter.

    Parameters missing from ``grads`` are treated as having zero gradient.
    ``lr_mult`` scales the rate per parameter group (``"f"``, ``"y"``, ``"d"``).
    """
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    new_tensors = {}
    new_velocity = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(p.shape)
        elif v.shape != p.shape:
            raise ShapeError(f"{name}: velocity shape {v.shape} != parameter shape {p.shape}")
        v = momentum * v + g
        rate = lr * (lr_mult or {}).get(name.split(".", 1)[0], 1.0)
        new_velocity[name] = v
        new_tensors[name] = Tensor(p.data - rate * v, requires_grad=p.requires_grad, name=name)
    return params.replace(new_tensors), OptimizerState(new_velocity)


def lr_schedule(step: int, s0: int, lr0: float, lr_alpha: float = 10.0, lr_beta: float = 0.75) -> float:
    """Annealed rate ``lr0 * (1 + lr_alpha * p) ** -lr_beta`` with ``p = step / s0``."""
    p = step / s0 if s0 > 0 else 0.0
    return lr0 * (1.0 + lr_alpha * p) ** (-lr_beta)


def grl_schedule(step: int, s0: int, grl_gamma: float = 10.0) -> float:
    """Reversal coefficient ramp ``2 / (1 + exp(-grl_gamma * p)) - 1``."""
    p = step / s0 if s0 > 0 else 0.0
    return 2.0 / (1.0 + math.exp(-grl_gamma * p)) - 1.0
