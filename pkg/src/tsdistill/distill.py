"""Masked-view self-distillation: students regress an EMA teacher's averaged latents."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .encoder import Encoder, EncoderConfig, encode, init_encoder
from .ndgrad import (
    AdamState,
    ContractError,
    OneCycleSchedule,
    ParameterError,
    Tape,
    Tensor,
    adam_step,
    no_grad,
    onecycle_lr,
)
from .ndgrad import functional as F

TARGET_NORM_EPS = 1e-5


# --- masking -----------------------------------------------------------------

@dataclass
class MaskConfig:
    mask_prob: float = 0.5
    max_block_frac: float = 0.1
    min_block_len: int = 1

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if not 0.0 < self.max_block_frac <= 1.0:
            raise ValueError("max_block_frac must lie in (0, 1]")
        if self.min_block_len < 1:
            raise ValueError("min_block_len must be >= 1")

    def max_block_len(self, length: int) -> int:
        # tolerance keeps e.g. 0.1 * 200 from rounding up to 21
        return max(1, math.ceil(self.max_block_frac * length - 1e-9))


@dataclass
class MaskPlan:
    """Sorted, disjoint half-open intervals ``[start, stop)`` over one series."""

    length: int
    intervals: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def masked_count(self) -> int:
        return sum(b - a for a, b in self.intervals)

    @property
    def fraction(self) -> float:
        return self.masked_count / self.length

    def gaps(self) -> List[Tuple[int, int]]:
        out = []
        cursor = 0
        for a, b in self.intervals:
            if a > cursor:
                out.append((cursor, a))
            cursor = b
        if cursor < self.length:
            out.append((cursor, self.length))
        return out

    def insert(self, start: int, stop: int) -> None:
        bisect.insort(self.intervals, (start, stop))

    def to_mask(self, total_length: Optional[int] = None) -> np.ndarray:
        m = np.zeros(total_length or self.length, dtype=bool)
        for a, b in self.intervals:
            m[a:b] = True
        return m


def sample_mask_plan(lengths: Sequence[int], config: MaskConfig, rng: np.random.Generator) -> List[MaskPlan]:
    """Inject random blocks round-robin until the batch masked fraction exceeds ``mask_prob``.

    Each injection picks an unmasked gap with probability proportional to its
    length, a block length in ``[min_block_len, min(gap, max_block_len)]`` and
    a start that keeps the block inside the gap.  The stopping rule is checked
    after every injection, so the final fraction overshoots ``mask_prob`` by
    less than one block.
    """
    lengths = [int(t) for t in lengths]
    if any(t < 1 for t in lengths):
        raise ContractError("every series needs at least one timestep")
    plans = [MaskPlan(t) for t in lengths]
    p = config.mask_prob
    if p == 0.0:
        return plans
    total = sum(lengths)
    masked = 0
    active = list(range(len(plans)))
    while active:
        still_active = []
        for i in active:
            plan = plans[i]
            gaps = plan.gaps()
            if not gaps:
                continue
            cum = np.cumsum([b - a for a, b in gaps])
            pick = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            pick = min(pick, len(gaps) - 1)
            g0, g1 = gaps[pick]
            cap = min(g1 - g0, config.max_block_len(plan.length))
            lo = min(config.min_block_len, cap)
            size = int(rng.integers(lo, cap + 1))
            start = int(rng.integers(g0, g1 - size + 1))
            plan.insert(start, start + size)
            masked += size
            if masked / total > p:
                return plans
            if masked_all(plan):
                continue
            still_active.append(i)
        active = still_active
    return plans


def masked_all(plan: MaskPlan) -> bool:
    return plan.masked_count >= plan.length


def plans_to_mask(plans: Sequence[MaskPlan], T: int) -> np.ndarray:
    """Stack plans into a ``[B, T]`` boolean mask, validating every interval."""
    out = np.zeros((len(plans), T), dtype=bool)
    for i, plan in enumerate(plans):
        for a, b in plan.intervals:
            if not 0 <= a < b <= min(T, plan.length):
                raise ContractError(f"interval [{a}, {b}) out of range for series {i} of length {plan.length}")
            out[i, a:b] = True
    return out


def apply_mask(projected: Tensor, mask, mask_embedding: Tensor) -> Tensor:
    """Replace masked timesteps of ``projected`` ``[B, W, T]`` with ``mask_embedding``.

    ``mask`` is either a ``[B, T]`` boolean array or a list of MaskPlans.
    """
    B, W, T = projected.shape
    if not isinstance(mask, np.ndarray):
        if len(mask) != B:
            raise ContractError(f"{len(mask)} plans for a batch of {B}")
        mask = plans_to_mask(mask, T)
    if mask.shape != (B, T):
        raise ContractError(f"mask shape {mask.shape} does not match batch [{B}, {T}]")
    if mask_embedding.shape != (W,):
        raise ContractError(f"mask embedding shape {mask_embedding.shape} != ({W},)")
    if not mask.any():
        return projected
    m = mask.astype(projected.dtype)[:, None, :]
    keep = F.mul(projected, 1.0 - m)
    fill = F.mul(F.reshape(mask_embedding, (1, W, 1)), m)
    return F.add(keep, fill)


# --- targets ----------------------------------------------------------------

@dataclass
class TargetConfig:
    top_k: int = 7
    layer_norm_targets: bool = True


def _normalize_vectors(h: np.ndarray) -> np.ndarray:
    mu = h.mean(axis=-1, keepdims=True)
    var = h.var(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + TARGET_NORM_EPS)


def average_top_layers(layers: Sequence[np.ndarray], cfg: TargetConfig) -> np.ndarray:
    if not 1 <= cfg.top_k <= len(layers):
        raise ParameterError(f"top_k={cfg.top_k} must lie in [1, {len(layers)}]")
    top = layers[-cfg.top_k:]
    if cfg.layer_norm_targets:
        top = [_normalize_vectors(h) for h in top]
    acc = np.zeros_like(top[0])
    for h in top:
        acc += h
    return acc / len(top)


def compute_targets(teacher: Encoder, batch, cfg: TargetConfig, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Teacher targets ``[B, T, W]``: mean of the (normalized) last ``top_k`` block outputs.

    The teacher sees the unmasked batch with eval-mode batch norm; no tape is
    involved so the result carries no gradient.
    """
    if not 1 <= cfg.top_k <= teacher.config.num_blocks:
        raise ParameterError(f"top_k={cfg.top_k} must lie in [1, {teacher.config.num_blocks}]")
    with no_grad():
        stack = encode(teacher, batch, training=False, valid=valid)
    return average_top_layers([h.data for h in stack.layers], cfg)


def collapse_metric(targets, valid: Optional[np.ndarray] = None) -> float:
    """Mean over feature dims of the std of target vectors across (series, time).

    Values near zero mean every timestep maps to the same vector.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    rows = t.reshape(-1, t.shape[-1]) if valid is None else t[np.asarray(valid, dtype=bool)]
    if rows.shape[0] < 2:
        raise ContractError("collapse_metric needs at least two vectors")
    return float(rows.astype(np.float64).std(axis=0).mean())


# --- EMA ----------------------------------------------------------------------

@dataclass(frozen=True)
class EMASchedule:
    total_steps: int
    delta_start: float = 0.9996
    delta_end: float = 0.99996

    def __post_init__(self):
        if not 0.0 <= self.delta_start <= self.delta_end < 1.0:
            raise ValueError("need 0 <= delta_start <= delta_end < 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def ema_delta(schedule: EMASchedule, step: float) -> float:
    """Linear ramp from ``delta_start`` (step 0) to ``delta_end`` (``total_steps``)."""
    frac = min(max(step, 0), schedule.total_steps) / schedule.total_steps
    return schedule.delta_start * (1.0 - frac) + schedule.delta_end * frac


def ema_update(teacher: Encoder, student: Encoder, delta: float) -> None:
    """``teacher <- (1 - delta) * student + delta * teacher`` for parameters and BN buffers."""
    for name, tp in teacher.params.items():
        sp = student.params[name]
        if sp.shape != tp.shape:
            raise ContractError(f"shape mismatch for {name}: {sp.shape} vs {tp.shape}")
        tp.data = ((1.0 - delta) * sp.data + delta * tp.data).astype(tp.dtype, copy=False)
    for name, tb in teacher.buffers.items():
        sb = student.buffers[name]
        tb[...] = (1.0 - delta) * sb + delta * tb


def total_steps_for(length: int, steps_per_kilostep: float = 600.0, minimum: int = 200) -> int:
    """Training length proportional to series length, floored at ``minimum``."""
    if length < 1:
        raise ContractError("series length must be >= 1")
    return max(int(math.ceil(steps_per_kilostep * length / 1000.0 - 1e-9)), minimum)


# --- training ---------------------------------------------------------------

@dataclass
class DistillConfig:
    mask: MaskConfig = field(default_factory=MaskConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    num_students: int = 3
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.1
    start_div: float = 25.0
    final_div: float = 1e4
    beta: float = 1.0
    delta_start: float = 0.9996
    delta_end: float = 0.99996
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class TrainState:
    """Everything that evolves during pretraining."""

    student: Encoder
    teacher: Encoder
    mask_embedding: Tensor
    head: Dict[str, Tensor]
    adam: AdamState
    lr_schedule: OneCycleSchedule
    ema_schedule: EMASchedule
    config: DistillConfig
    rng: np.random.Generator
    step: int = 0

    @property
    def total_steps(self) -> int:
        return self.lr_schedule.total_steps

    def trainable(self) -> List[Tensor]:
        return self.student.parameters() + [self.mask_embedding] + list(self.head.values())

    def zero_grad(self) -> None:
        for p in self.trainable():
            p.grad = None


def init_train_state(
    encoder_config: EncoderConfig,
    config: DistillConfig,
    total_steps: int,
    seed: int,
    dtype=np.float32,
) -> TrainState:
    """Fresh student, an identical gradient-free teacher and zeroed optimizer state.

    The student's prediction head is a per-timestep affine map initialized
    to the identity.
    """
    if not 1 <= config.target.top_k <= encoder_config.num_blocks:
        raise ParameterError(f"top_k={config.target.top_k} must lie in [1, {encoder_config.num_blocks}]")
    rng = np.random.default_rng(seed)
    student = init_encoder(encoder_config, rng, dtype=dtype)
    teacher = student.copy(requires_grad=False)
    W = encoder_config.width
    mask_embedding = Tensor(rng.normal(0.0, 0.02, size=W).astype(dtype), requires_grad=True)
    head = {
        "head.weight": Tensor(np.eye(W, dtype=dtype)[:, :, None], requires_grad=True),
        "head.bias": Tensor(np.zeros(W, dtype=dtype), requires_grad=True),
    }
    state = TrainState(
        student=student,
        teacher=teacher,
        mask_embedding=mask_embedding,
        head=head,
        adam=AdamState([], [], beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps),
        lr_schedule=OneCycleSchedule(config.lr, total_steps, config.warmup_fraction, config.start_div, config.final_div),
        ema_schedule=EMASchedule(total_steps, config.delta_start, config.delta_end),
        config=config,
        rng=rng,
    )
    params = state.trainable()
    state.adam.m = [np.zeros_like(p.data) for p in params]
    state.adam.v = [np.zeros_like(p.data) for p in params]
    return state


def student_predictions(state: TrainState, batch, mask: np.ndarray, valid: Optional[np.ndarray] = None,
                        training: bool = True) -> Tensor:
    """Student forward on ``batch`` with ``mask`` applied after the input projection -> ``[B, T, W]``."""
    stack = encode(
        state.student, batch, training=training, rng=state.rng,
        mask_hook=lambda h: apply_mask(h, mask, state.mask_embedding), valid=valid,
    )
    h = F.transpose(stack.output, (0, 2, 1))
    out = F.conv1d(h, state.head["head.weight"], state.head["head.bias"], 1)
    return F.transpose(out, (0, 2, 1))


def distill_loss(state: TrainState, batch: np.ndarray, targets: np.ndarray, masks: np.ndarray,
                 valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean over students of the smooth-L1 error on their masked, valid timesteps.

    ``masks`` is ``[S, B, T]``; all students run as one concatenated batch.
    Must be called under a tape for gradients.
    """
    S, B, T = masks.shape
    W = targets.shape[-1]
    counts = masks.sum(axis=(1, 2))
    scale = np.where(counts > 0, 1.0 / (np.maximum(counts, 1) * W * S), 0.0)
    weights = (masks * scale[:, None, None]).reshape(S * B, T, 1).astype(batch.dtype)
    xs = np.concatenate([batch] * S)
    vs = None if valid is None else np.concatenate([valid] * S)
    pred = student_predictions(state, xs, masks.reshape(S * B, T), vs)
    tiled = np.concatenate([targets] * S)
    return F.smooth_l1(pred, tiled, state.config.beta, weight=weights)


def train_step(state: TrainState, batch, valid: Optional[np.ndarray] = None) -> Tuple[float, Dict[str, float]]:
    """One pretraining step: targets, S masked students, Adam, EMA.

    Returns the loss and a metrics dict with ``lr``, ``delta``,
    ``masked_frac`` and ``collapse``.
    """
    if state.step >= state.total_steps:
        raise ContractError(f"step {state.step} is past total_steps={state.total_steps}")
    cfg = state.config
    batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=state.mask_embedding.dtype)
    B, _, T = batch.shape
    lengths = [T] * B if valid is None else [int(v) for v in np.asarray(valid).sum(axis=1)]

    targets = compute_targets(state.teacher, batch, cfg.target, valid)
    masks = np.stack([plans_to_mask(sample_mask_plan(lengths, cfg.mask, state.rng), T)
                      for _ in range(cfg.num_students)])
    masked_frac = float(masks.sum() / (sum(lengths) * cfg.num_students))
    lr = onecycle_lr(state.lr_schedule, state.step)
    delta = ema_delta(state.ema_schedule, state.step)
    metrics = {
        "lr": lr,
        "delta": delta,
        "masked_frac": masked_frac,
        "collapse": collapse_metric(targets, valid),
    }
    if not masks.any():
        state.step += 1
        return 0.0, metrics

    state.zero_grad()
    with Tape() as tape:
        loss = distill_loss(state, batch, targets, masks, valid)
    tape.backward(loss)
    adam_step(state.trainable(), state.adam, lr, cfg.weight_decay)
    ema_update(state.teacher, state.student, delta)
    state.step += 1
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    return value, metrics
