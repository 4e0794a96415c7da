"""Dilated residual CNN encoder producing one feature vector per timestamp."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .ndgrad import ContractError, Tensor
from .ndgrad import functional as F


@dataclass
class EncoderConfig:
    in_channels: int = 1
    width: int = 320
    num_blocks: int = 7
    kernel_size: int = 3
    dropout_rate: float = 0.1
    init_scale: float = 1.0
    activation: str = "gelu"
    use_batch_norm: bool = True

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation not in F.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def receptive_field(config: EncoderConfig) -> int:
    """Number of input steps that can influence one output step."""
    k = config.kernel_size
    return 1 + sum(2 * (k - 1) * 2 ** l for l in range(config.num_blocks))


@dataclass
class HiddenStack:
    """Per-block activations, each ``[B, T, W]``; the last one is the encoder output."""

    layers: List[Tensor]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i) -> Tensor:
        return self.layers[i]

    @property
    def output(self) -> Tensor:
        return self.layers[-1]


MaskHook = Callable[[Tensor], Tensor]


class Encoder:
    """Input projection plus ``num_blocks`` residual blocks with dilation ``2**l``.

    Parameters live in ``params`` (trainable tensors) and batch-norm running
    statistics in ``buffers`` (plain arrays), both keyed by dotted names.
    """

    def __init__(self, config: EncoderConfig, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Every parameter and buffer array by name (parameters first)."""
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=p.dtype).reshape(p.shape)
        for name, b in self.buffers.items():
            b[...] = arrays[name]

    def copy(self, requires_grad: Optional[bool] = None) -> "Encoder":
        params = {}
        for name, p in self.params.items():
            rg = p.requires_grad if requires_grad is None else requires_grad
            params[name] = Tensor(p.data.copy(), requires_grad=rg)
        return Encoder(copy.deepcopy(self.config), params, {k: v.copy() for k, v in self.buffers.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, batch, **kwargs) -> HiddenStack:
        return encode(self, batch, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int, scale: float, dtype) -> np.ndarray:
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Encoder:
    """Fan-in scaled uniform init ``U(-s/sqrt(fan_in), s/sqrt(fan_in))`` with ``s = init_scale``."""
    W, C, k = config.width, config.in_channels, config.kernel_size
    s = config.init_scale
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}

    def param(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    param("input.weight", _uniform(rng, (W, C, 1), C, s, dtype))
    param("input.bias", np.zeros(W, dtype=dtype))
    for l in range(config.num_blocks):
        for i in (1, 2):
            pre = f"blocks.{l}"
            param(f"{pre}.conv{i}.weight", _uniform(rng, (W, W, k), W * k, s, dtype))
            param(f"{pre}.conv{i}.bias", np.zeros(W, dtype=dtype))
            if config.use_batch_norm:
                param(f"{pre}.bn{i}.gamma", np.ones(W, dtype=dtype))
                param(f"{pre}.bn{i}.beta", np.zeros(W, dtype=dtype))
                buffers[f"{pre}.bn{i}.running_mean"] = np.zeros(W, dtype=dtype)
                buffers[f"{pre}.bn{i}.running_var"] = np.ones(W, dtype=dtype)
    return Encoder(config, params, buffers)


def _zero_invalid(h: Tensor, valid_f: Optional[np.ndarray]) -> Tensor:
    return h if valid_f is None else F.mul(h, valid_f)


def encode(
    encoder: Encoder,
    batch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    mask_hook: Optional[MaskHook] = None,
    valid: Optional[np.ndarray] = None,
) -> HiddenStack:
    """Run the encoder on ``batch`` ``[B, C, T]``.

    Args:
        training: batch-norm batch statistics and active dropout when True.
        rng: dropout randomness (required when training with dropout > 0).
        mask_hook: applied to the projected ``[B, W, T]`` input before block 0.
        valid: ``[B, T]`` boolean mask of real (non-padding) timesteps.  Padded
            positions are held at zero between convolutions and excluded from
            batch-norm statistics, so a right-padded series encodes exactly
            like its unpadded self (up to the batch statistics).

    Returns:
        A :class:`HiddenStack` with one ``[B, T, W]`` tensor per block.
    """
    cfg = encoder.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=encoder.params["input.weight"].dtype))
    if x.ndim != 3:
        raise ContractError(f"expected [B, C, T] input, got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ContractError(f"encoder expects {cfg.in_channels} channels, got {x.shape[1]}")
    if x.shape[2] < 1:
        raise ContractError("input must have at least one timestep")
    valid_f = None
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (x.shape[0], x.shape[2]):
            raise ContractError(f"valid mask shape {valid.shape} does not match batch {x.shape}")
        if valid.all():
            valid = None
        else:
            valid_f = valid.astype(x.dtype)[:, None, :]
            x = F.mul(x, valid_f)
    act = F.ACTIVATIONS[cfg.activation]
    p = encoder.params
    b = encoder.buffers

    h = F.conv1d(x, p["input.weight"], p["input.bias"], 1)
    if mask_hook is not None:
        h = mask_hook(h)
    h = _zero_invalid(h, valid_f)

    def norm(z, pre):
        if not cfg.use_batch_norm:
            return z
        return F.batch_norm1d(
            z, p[pre + ".gamma"], p[pre + ".beta"],
            b[pre + ".running_mean"], b[pre + ".running_var"],
            training=training, valid=valid,
        )

    layers = []
    for l in range(cfg.num_blocks):
        pre = f"blocks.{l}"
        d = 2 ** l
        z = F.conv1d(h, p[pre + ".conv1.weight"], p[pre + ".conv1.bias"], d)
        z = act(norm(z, pre + ".bn1"))
        z = F.dropout(z, cfg.dropout_rate, training, rng)
        z = _zero_invalid(z, valid_f)
        z = F.conv1d(z, p[pre + ".conv2.weight"], p[pre + ".conv2.bias"], d)
        z = norm(z, pre + ".bn2")
        h = _zero_invalid(act(F.add(z, h)), valid_f)
        layers.append(F.transpose(h, (0, 2, 1)))
    return HiddenStack(layers)
