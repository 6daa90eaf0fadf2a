"""SGD, Adam with coupled L2 weight decay, and the warmup-then-halving schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.997
ADAM_EPS = 1e-9
WEIGHT_DECAY = 1e-5


def _grads(params: Sequence[Tensor], grads=None) -> list[np.ndarray]:
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    return grads


def sgd_step(params: Sequence[Tensor], lr: float, grads=None) -> None:
    """theta <- theta - lr * grad, in place."""
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    for p, g in zip(params, _grads(params, grads)):
        p.data = p.data - lr * g


class Adam:
    """Bias-corrected Adam. Weight decay is added to the gradient (coupled L2)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS, weight_decay: float = WEIGHT_DECAY):
        if lr <= 0 or eps <= 0:
            raise ConfigError("learning rate and eps must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None, lr: float | None = None) -> None:
        grads = _grads(self.params, grads)
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(float(self.t))}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        self.m = [np.array(state[f"m.{i}"], dtype=np.float64) for i in range(len(self.params))]
        self.v = [np.array(state[f"v.{i}"], dtype=np.float64) for i in range(len(self.params))]


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_start: float = 1e-5
    warmup_end: float = 1e-3
    warmup_epochs: float = 1.0
    halving_period: float = 2.0

    def __post_init__(self):
        if not 0 < self.warmup_start <= self.warmup_end:
            raise ConfigError("warmup needs 0 < start <= end")
        if self.halving_period < 1:
            raise ConfigError("halving period must be at least one epoch")
        if self.warmup_epochs <= 0:
            raise ConfigError("warmup must last a positive number of epochs")


def schedule_lr(config: ScheduleConfig, epoch: float) -> float:
    """Linear warmup over [0, warmup_epochs), then halve every ``halving_period`` epochs.

    ``epoch`` may be fractional (step / steps_per_epoch).
    """
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    if epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        return config.warmup_start + (config.warmup_end - config.warmup_start) * frac
    halvings = math.floor((epoch - config.warmup_epochs) / config.halving_period)
    return config.warmup_end * 0.5 ** halvings
