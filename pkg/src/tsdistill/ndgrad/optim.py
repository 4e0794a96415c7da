"""Adam with decoupled weight decay and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    """Moment buffers for a fixed, ordered list of parameters."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` is applied before the
    Adam delta and never enters the moment estimates.  Parameters whose
    ``grad`` is None are treated as having a zero gradient.
    """
    if len(params) != len(state.m):
        raise ContractError(f"{len(params)} params but {len(state.m)} moment buffers")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.shape:
            raise ContractError(f"moment shape {m.shape} does not match parameter {p.shape}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data
        if weight_decay:
            data = data - lr * weight_decay * data
        mhat = m / c1
        vhat = v / c2
        p.data = (data - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.1
    start_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.start_div <= 0 or self.final_div <= 0:
            raise ValueError("divisors must be positive")

    @property
    def warmup_steps(self) -> float:
        return self.total_steps * self.warmup_fraction


def _cos_interp(start: float, end: float, frac: float) -> float:
    # written as a convex combination so frac in {0, 1} returns the endpoint exactly
    w = 0.5 * (1.0 + math.cos(math.pi * frac))
    return start * w + end * (1.0 - w)


def onecycle_lr(schedule: OneCycleSchedule, step: float) -> float:
    """Learning rate at ``step``: cosine rise to ``max_lr``, then cosine decay.

    Steps outside ``[0, total_steps]`` are clamped.
    """
    step = min(max(step, 0), schedule.total_steps)
    peak = schedule.max_lr
    initial = peak / schedule.start_div
    final = peak / schedule.final_div
    warm = schedule.warmup_steps
    if step <= warm:
        return _cos_interp(initial, peak, step / warm)
    return _cos_interp(peak, final, (step - warm) / (schedule.total_steps - warm))
