"""AdamW and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class OptimizerStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float
    final_lr: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")


def cosine_lr(schedule: LrSchedule, step: int) -> float:
    """Cosine annealing from ``initial_lr`` at step 0 to ``final_lr`` at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step == 0:
        return schedule.initial_lr
    if step == schedule.total_steps:
        return schedule.final_lr
    frac = step / schedule.total_steps
    return schedule.final_lr + 0.5 * (schedule.initial_lr - schedule.final_lr) * (
        1.0 + math.cos(math.pi * frac)
    )


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Gradients are read from ``param.grad``; a parameter without a gradient is
    treated as having a zero gradient.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise OptimizerStateError(
                f"parameter {name!r} changed shape {m.shape} -> {p.data.shape}"
            )
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1))) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total
