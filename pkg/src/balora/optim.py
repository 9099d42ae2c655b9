"""AdamW with decoupled weight decay and warmup + annealing learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from balora.errors import ConfigInvalid, ShapeMismatch

Schedule = Literal["cosine", "linear", "constant"]


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    schedule: Schedule = "cosine"
    batch_size: int = 128
    epochs: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ConfigInvalid("lr must be >= 0")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigInvalid("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigInvalid("eps must be > 0 and weight_decay >= 0")
        if not 0 <= self.warmup_ratio <= 1:
            raise ConfigInvalid("warmup_ratio must lie in [0, 1]")
        if self.schedule not in ("cosine", "linear", "constant"):
            raise ConfigInvalid(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigInvalid("batch_size must be >= 1 and epochs >= 0")

    def warmup_steps(self, total_steps: int) -> int:
        return int(math.floor(self.warmup_ratio * total_steps + 0.5))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Linear warmup from 0, then cosine or linear decay to 0 (or hold for ``constant``)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_steps(total_steps)
    if step < warm:
        return cfg.lr * step / warm
    if cfg.schedule == "constant" or total_steps == warm:
        return cfg.lr
    progress = (step - warm) / (total_steps - warm)
    if cfg.schedule == "linear":
        return cfg.lr * (1.0 - progress)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: OptimConfig,
    step: int,
    lr: float | None = None,
) -> dict[str, np.ndarray]:
    """One in-place AdamW update; ``step`` is 1-based and drives bias correction.

    Only names present in ``params`` are touched.
    """
    if step < 1:
        raise ValueError("step is 1-based")
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"grad for {name!r} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        if m.shape != p.shape:
            raise ShapeMismatch(f"optimizer state for {name!r} has shape {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params
