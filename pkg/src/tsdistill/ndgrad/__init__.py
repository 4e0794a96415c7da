"""Minimal dense tensors with reverse-mode autodiff."""

from . import functional
from .functional import (
    ParameterError,
    batch_norm1d,
    conv1d,
    dropout,
    gelu,
    relu,
    smooth_l1,
)
from .optim import AdamState, OneCycleSchedule, adam_step, onecycle_lr
from .tensor import ContractError, Tape, Tensor, backward, no_grad, set_debug

__all__ = [
    "AdamState",
    "ContractError",
    "OneCycleSchedule",
    "ParameterError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "batch_norm1d",
    "conv1d",
    "dropout",
    "functional",
    "gelu",
    "no_grad",
    "onecycle_lr",
    "relu",
    "set_debug",
    "smooth_l1",
]
