"""Flat ``key = value`` run configuration with typed validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .distill import DistillConfig, MaskConfig, TargetConfig
from .encoder import EncoderConfig
from .heads import LOGISTIC_GRID, RIDGE_GRID, CVGrid


class ConfigError(ValueError):
    pass


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    """Every pretraining and probing knob.

    Values the source method tuned but never published (lr, weight decay,
    masking probability, dropout, init scale, smooth-L1 beta, warmup) carry
    conventional defaults.
    """

    seed: int = 0
    # encoder
    width: int = 320
    num_blocks: int = 7
    kernel_size: int = 3
    dropout: float = 0.1
    init_scale: float = 1.0
    activation: str = "gelu"
    use_batch_norm: bool = True
    # masking / targets
    mask_prob: float = 0.5
    max_block_frac: float = 0.1
    min_block_len: int = 1
    top_k: int = 7
    layer_norm_targets: bool = True
    # optimization
    num_students: int = 3
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.1
    start_div: float = 25.0
    final_div: float = 1e4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    smooth_l1_beta: float = 1.0
    delta_start: float = 0.9996
    delta_end: float = 0.99996
    steps_per_kilostep: float = 600.0
    min_steps: int = 200
    total_steps: int = 0
    # data
    crop_window: int = 1024
    forecast_context: int = 200
    horizons: Tuple[int, ...] = (24, 48)
    split_fractions: Tuple[float, ...] = (0.6, 0.2, 0.2)
    normalize: bool = True
    # probing
    probe_every: int = 0
    probe_network: str = "teacher"
    cv_folds: int = 5
    logistic_grid: Tuple[float, ...] = LOGISTIC_GRID
    ridge_grid: Tuple[float, ...] = RIDGE_GRID
    # guardrails
    collapse_threshold: float = 1e-4
    collapse_patience: int = 50
    # paths (command-line flags take precedence)
    data: str = ""
    test_data: str = ""
    out: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.encoder_config(1)
            self.distill_config()
            CVGrid(self.logistic_grid, self.cv_folds)
            CVGrid(self.ridge_grid, self.cv_folds, "mse")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 1 <= self.top_k <= self.num_blocks:
            raise ConfigError(f"top_k must lie in [1, num_blocks={self.num_blocks}]")
        if self.num_students < 1 or self.batch_size < 1:
            raise ConfigError("num_students and batch_size must be positive")
        if self.probe_network not in ("teacher", "student"):
            raise ConfigError("probe_network must be 'teacher' or 'student'")
        if self.crop_window < 1 or self.forecast_context < 1:
            raise ConfigError("crop windows must be positive")
        if not self.horizons or min(self.horizons) < 1:
            raise ConfigError("horizons must be positive")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions needs three fractions summing to 1")
        if self.smooth_l1_beta <= 0 or self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("smooth_l1_beta must be positive; lr and weight_decay non-negative")
        if self.total_steps < 0 or self.min_steps < 1 or self.steps_per_kilostep <= 0:
            raise ConfigError("invalid step budget")

    def encoder_config(self, in_channels: int) -> EncoderConfig:
        return EncoderConfig(
            in_channels=in_channels, width=self.width, num_blocks=self.num_blocks,
            kernel_size=self.kernel_size, dropout_rate=self.dropout, init_scale=self.init_scale,
            activation=self.activation, use_batch_norm=self.use_batch_norm,
        )

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            mask=MaskConfig(self.mask_prob, self.max_block_frac, self.min_block_len),
            target=TargetConfig(self.top_k, self.layer_norm_targets),
            num_students=self.num_students, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, warmup_fraction=self.warmup_fraction,
            start_div=self.start_div, final_div=self.final_div, beta=self.smooth_l1_beta,
            delta_start=self.delta_start, delta_end=self.delta_end,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
        )

    def logistic_cv(self) -> CVGrid:
        return CVGrid(self.logistic_grid, self.cv_folds, "accuracy")

    def ridge_cv(self) -> CVGrid:
        return CVGrid(self.ridge_grid, self.cv_folds, "mse")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # --- text form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: Optional[Dict[str, str]] = None) -> "RunConfig":
        raw: Dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        raw.update(overrides or {})
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: Dict[str, str]) -> "RunConfig":
        types = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            try:
                kwargs[key] = _parse(value, types[key].default)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, Path], overrides: Optional[Dict[str, str]] = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), overrides)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text, default):
    if not isinstance(text, str):
        return text
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if default and all(isinstance(v, int) for v in default):
            return _ints(text)
        return _floats(text)
    return text
