"""Differentiable operators used by the encoder and the distillation loss."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import ContractError, Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_GELU_C = math.sqrt(2.0 / math.pi)


class ParameterError(ValueError):
    """An operator hyperparameter is outside its valid range."""


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data / b.data, (a, b), bw)


# --- reductions and views --------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_result(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return make_result(np.asarray(x.data.mean(axis=axis)), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return make_result(x.data.transpose(axes), (x,), bw)


# --- layers ----------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, dilation: int, T: int) -> np.ndarray:
    # [B, Cin, Tpad] -> [B, Cin*k, T], row index = c*k + j
    B, Cin, _ = xp.shape
    cols = np.empty((B, Cin, k, T), dtype=xp.dtype)
    for j in range(k):
        cols[:, :, j, :] = xp[:, :, j * dilation: j * dilation + T]
    return cols.reshape(B, Cin * k, T)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor], dilation: int = 1) -> Tensor:
    """Dilated 1-D convolution with symmetric "same" zero padding.

    Args:
        x: input ``[B, Cin, T]``.
        weight: kernel ``[Cout, Cin, k]`` with odd ``k``.
        bias: ``[Cout]`` or None.
        dilation: spacing between kernel taps.

    Returns:
        ``[B, Cout, T]`` where
        ``out[b, o, t] = bias[o] + sum_{c, j} w[o, c, j] * xpad[b, c, t + j * dilation]``.
    """
    if not isinstance(dilation, (int, np.integer)) or dilation <= 0:
        raise ParameterError(f"dilation must be a positive int, got {dilation!r}")
    if x.ndim != 3 or weight.ndim != 3:
        raise ContractError(f"conv1d expects 3-d input and weight, got {x.shape} and {weight.shape}")
    B, Cin, T = x.shape
    Cout, wcin, k = weight.shape
    if wcin != Cin:
        raise ContractError(f"weight expects {wcin} input channels, input has {Cin}")
    if k % 2 == 0:
        raise ContractError(f"kernel size must be odd, got {k}")
    if bias is not None and bias.shape != (Cout,):
        raise ContractError(f"bias shape {bias.shape} does not match {Cout} output channels")
    pad = dilation * (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, dilation, T)
    w2 = weight.data.reshape(Cout, Cin * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g).reshape(B, Cin, k, T)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation: j * dilation + T] += gcols[:, :, j, :]
            gx = gxp[:, :, pad: pad + T] if pad else gxp
        if weight.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(Cout, Cin, k)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, bw)


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    valid: Optional[np.ndarray] = None,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over batch and time.

    In training mode the statistics come from the positions flagged by
    ``valid`` (``[B, T]``, all positions when None) and the running buffers are
    updated in place with ``momentum``; the running variance uses the unbiased
    estimate.  In eval mode the running buffers are used as-is.
    """
    B, C, T = x.shape
    xd = x.data
    if not training:
        scale = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None]) * scale[None, :, None]
        out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

        def bw_eval(g):
            gx = g * (gamma.data * scale)[None, :, None]
            return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

        return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw_eval)

    if valid is None:
        m = None
        n = B * T
    else:
        m = valid.astype(xd.dtype)[:, None, :]
        n = int(valid.sum())
    if n < 2:
        raise ContractError("batch_norm1d in training mode needs at least 2 valid positions")
    if m is None:
        mu = xd.mean(axis=(0, 2))
        centered = xd - mu[None, :, None]
        var = (centered * centered).mean(axis=(0, 2))
    else:
        mu = (xd * m).sum(axis=(0, 2)) / n
        centered = xd - mu[None, :, None]
        var = (centered * centered * m).sum(axis=(0, 2)) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * (n / (n - 1))

    def bw(g):
        dxhat = g * gamma.data[None, :, None]
        s1 = dxhat.sum(axis=(0, 2))
        s2 = (dxhat * xhat).sum(axis=(0, 2))
        corr = (s1[None, :, None] + xhat * s2[None, :, None]) / n
        if m is not None:
            corr = corr * m
        gx = (dxhat - corr) * inv[None, :, None]
        return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return make_result(out, (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), bw)


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"gelu": gelu, "relu": relu, "identity": identity}


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def bw(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), bw)


def smooth_l1(pred: Tensor, target, beta: float = 1.0, weight: Optional[np.ndarray] = None) -> Tensor:
    """Smooth-L1 (Huber-style) regression loss.

    Per element ``0.5 * d**2 / beta`` if ``|d| < beta`` else ``|d| - 0.5 * beta``
    with ``d = pred - target``.  Without ``weight`` the result is the mean over
    elements; with ``weight`` (broadcastable to ``pred``) it is the weighted
    sum ``sum(weight * loss)``, so the caller owns the normalization.
    """
    if beta <= 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if tdata.shape != pred.shape:
        raise ContractError(f"pred {pred.shape} and target {tdata.shape} differ in shape")
    d = pred.data - tdata
    ad = np.abs(d)
    small = ad < beta
    elem = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    if weight is None:
        value = elem.mean()
        scale = np.full(pred.shape, 1.0 / d.size, dtype=pred.dtype)
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=pred.dtype), pred.shape)
        value = (elem * w).sum()
        scale = w

    def bw(g):
        dl = np.where(small, d / beta, np.sign(d))
        return (g * dl * scale,)

    return make_result(np.asarray(value, dtype=pred.dtype), (pred,), bw)
