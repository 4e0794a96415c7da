"""End-to-end pieces shared by the CLI and the acceptance checks."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import MetricsLog, load_train_state, save_checkpoint
from .config import RunConfig
from .data import ForecastWindows, SeriesSet, make_forecast_windows, random_crop, split_bounds
from .distill import TrainState, init_train_state, total_steps_for, train_step
from .encoder import Encoder, encode
from .heads import (
    CVGrid,
    ProbeFeatures,
    ProbeRecord,
    eval_classification,
    eval_forecast,
    fit_logistic,
    fit_ridge,
    forecast_errors,
    last_step_feature,
    max_pool_time,
    probe_due,
)
from .ndgrad import no_grad

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_COLLAPSE = 2


# --- frozen-encoder features ----------------------------------------------------

def encode_series(encoder: Encoder, values: np.ndarray, valid: Optional[np.ndarray] = None,
                  batch_size: int = 64) -> np.ndarray:
    """Eval-mode encoder output ``[N, T, W]`` for ``values`` ``[N, C, T]``."""
    dtype = encoder.params["input.weight"].dtype
    out = []
    for i in range(0, values.shape[0], batch_size):
        v = None if valid is None else valid[i: i + batch_size]
        with no_grad():
            stack = encode(encoder, values[i: i + batch_size].astype(dtype), training=False, valid=v)
        out.append(stack.output.data)
    return np.concatenate(out)


def pooled_features(encoder: Encoder, data: SeriesSet, batch_size: int = 64) -> ProbeFeatures:
    valid = data.valid
    hidden = encode_series(encoder, data.values, None if valid.all() else valid, batch_size)
    return max_pool_time(hidden, valid)


def classification_probe(encoder: Encoder, train: SeriesSet, test: SeriesSet,
                         grid: Optional[CVGrid] = None, seed: int = 0) -> Tuple[float, object]:
    """Fit the logistic probe on train-split features and score test accuracy."""
    clf = fit_logistic(pooled_features(encoder, train), train.labels, grid, np.random.default_rng(seed))
    return eval_classification(clf, pooled_features(encoder, test), test.labels), clf


def window_features(encoder: Encoder, values: np.ndarray, windows: ForecastWindows, split: str,
                    batch_size: int = 256) -> np.ndarray:
    """Last-timestep features of every context window in ``split``; ``values`` is ``[C, T]``."""
    idx = windows.context_indices(split)
    feats = []
    for i in range(0, len(idx), batch_size):
        ctx = values[:, idx[i: i + batch_size]].transpose(1, 0, 2)
        feats.append(last_step_feature(encode_series(encoder, ctx, batch_size=batch_size)).features)
    return np.concatenate(feats) if feats else np.zeros((0, encoder.config.width))


def window_targets(values: np.ndarray, windows: ForecastWindows, split: str, horizon: int) -> np.ndarray:
    """``[n, horizon * C]`` targets, horizon-major per channel block."""
    tidx = windows.target_indices(split, horizon)
    return values[:, tidx].transpose(1, 0, 2).reshape(len(tidx), -1)


def last_value_baseline(values: np.ndarray, windows: ForecastWindows, split: str, horizon: int) -> Tuple[float, float]:
    """(MSE, MAE) of repeating the last context value over the horizon."""
    last = values[:, windows.starts[split] + windows.context_len - 1]  # [C, n]
    pred = np.repeat(last.T[:, :, None], horizon, axis=2).reshape(len(windows.starts[split]), -1)
    return forecast_errors(pred, window_targets(values, windows, split, horizon))


def forecast_probe(encoder: Encoder, values: np.ndarray, windows: ForecastWindows,
                   grid: Optional[CVGrid] = None, eval_split: str = "test") -> Dict[int, Tuple[float, float]]:
    """Ridge probe per horizon: fit on train windows, score ``eval_split`` windows."""
    Xtr = window_features(encoder, values, windows, "train")
    Xte = window_features(encoder, values, windows, eval_split)
    out = {}
    for h in windows.horizons:
        sol = fit_ridge(Xtr, window_targets(values, windows, "train", h), grid)
        out[h] = eval_forecast(sol, Xte, window_targets(values, windows, eval_split, h))
    return out


def forecast_table(scores: Dict[int, Tuple[float, float]]) -> List[Tuple[str, float, float]]:
    """Rows ``(H, MSE, MAE)`` plus an ``avg`` row of their arithmetic means."""
    rows = [(str(h), mse, mae) for h, (mse, mae) in scores.items()]
    rows.append(("avg", float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows]))))
    return rows


def series_windows(data: SeriesSet, config: RunConfig, horizons: Optional[Sequence[int]] = None) -> ForecastWindows:
    length = int(data.lengths[0])
    bounds = split_bounds(length, config.split_fractions)
    return make_forecast_windows(length, config.forecast_context, horizons or config.horizons,
                                 bounds, data.num_channels)


def train_portion(data: SeriesSet, config: RunConfig) -> SeriesSet:
    """The train split of a single long series as its own SeriesSet."""
    a, b = split_bounds(int(data.lengths[0]), config.split_fractions)["train"]
    return replace(data, values=data.values[:, :, a:b], lengths=np.array([b - a]))


# --- pretraining ---------------------------------------------------------------------

@dataclass
class PretrainResult:
    state: TrainState
    exit_code: int
    record: ProbeRecord
    final_checkpoint: Path
    losses: List[float] = field(default_factory=list)
    collapse: List[float] = field(default_factory=list)


def probe_encoder(state: TrainState, which: str) -> Encoder:
    return state.teacher if which == "teacher" else state.student


def pretrain(
    config: RunConfig,
    train: SeriesSet,
    out_dir,
    crop_window: Optional[int] = None,
    probe_fn: Optional[Callable[[Encoder], float]] = None,
    higher_is_better: bool = True,
    resume: Optional[Path] = None,
) -> PretrainResult:
    """Self-distillation pretraining on ``train`` with logging and checkpoints.

    Steps are budgeted from the longest training series unless
    ``config.total_steps`` is set.  After every probe-cadence step (and the
    last one) ``probe_fn`` scores the probed network and a checkpoint is
    written.  Training stops early with exit code 2 when the collapse metric
    stays below ``collapse_threshold`` for ``collapse_patience`` steps.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    window = crop_window or config.crop_window
    total = config.total_steps or total_steps_for(int(train.lengths.max()), config.steps_per_kilostep, config.min_steps)
    every = config.probe_every or max(total // 10, 50)

    record = ProbeRecord(higher_is_better=higher_is_better)
    collapse_run = 0
    if resume is not None:
        state, _, meta = load_train_state(resume)
        extra = meta.get("extra", {})
        collapse_run = int(extra.get("collapse_run", 0))
        for step, score in extra.get("probe_history", []):
            record.update(int(step), float(score))
        if state.total_steps != total:
            raise ValueError(f"checkpoint budgets {state.total_steps} steps, config implies {total}")
    else:
        state = init_train_state(config.encoder_config(train.num_channels), config.distill_config(),
                                 total, config.seed)
    log = MetricsLog(out_dir / "metrics.tsv", notes={"normalize": str(config.normalize).lower(), "seed": config.seed})
    result = PretrainResult(state, EXIT_OK, record, out_dir / "final.ckpt")

    def checkpoint(path: Path) -> None:
        save_checkpoint(path, state, config, train.num_channels,
                        extra={"collapse_run": collapse_run, "probe_history": record.history})

    N = train.num_series
    B = config.batch_size
    while state.step < total:
        t0 = time.perf_counter()
        idx = state.rng.choice(N, size=B, replace=N < B)
        batch, valid = random_crop(train, window, state.rng, idx)
        loss, metrics = train_step(state, batch.astype(np.float32), None if valid.all() else valid)
        step = state.step
        due = probe_due(step, total, every)
        score = None
        if due and probe_fn is not None:
            score = float(probe_fn(probe_encoder(state, config.probe_network)))
            record.update(step, score)
        collapse_run = collapse_run + 1 if metrics["collapse"] < config.collapse_threshold else 0
        result.losses.append(loss)
        result.collapse.append(metrics["collapse"])
        log.append({
            "step": step, "loss": loss, "lr": metrics["lr"], "delta": metrics["delta"],
            "masked_frac": metrics["masked_frac"], "collapse": metrics["collapse"],
            "probe_score": score, "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        })
        if due:
            checkpoint(out_dir / f"checkpoint_{step:06d}.ckpt")
        if collapse_run >= config.collapse_patience:
            logger.error("representation collapse at step %d; aborting", step)
            checkpoint(result.final_checkpoint)
            result.exit_code = EXIT_COLLAPSE
            return result
    checkpoint(result.final_checkpoint)
    return result
