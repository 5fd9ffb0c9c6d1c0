"""Numerical kernels on channel-by-time sequences.

Sequences are float64 arrays shaped ``(C, T)`` or batched ``(B, C, T)``.
Convolution kernels are ``(C_out, C_in, k)`` with tap 0 applied to the most
recent sample and tap ``k - 1`` to the oldest. Samples before the start of
the sequence read as zero, so the output keeps the input length.
"""

from __future__ import annotations

import numpy as np

from cnnqoe.errors import ParameterError, ShapeError

SELU_ALPHA = 1.67733
SELU_LAMBDA = 1.0507


def _as_series(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ShapeError(f"expected (C, T) or (B, C, T) array, got shape {x.shape}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"empty series of shape {x.shape}")
    return x


def _shift(x: np.ndarray, s: int) -> np.ndarray:
    """Delay ``x`` by ``s`` steps along time, filling with zeros."""
    if s == 0:
        return x
    out = np.zeros_like(x)
    if s < x.shape[-1]:
        out[..., s:] = x[..., :-s]
    return out


def _advance(x: np.ndarray, s: int) -> np.ndarray:
    """Adjoint of :func:`_shift`."""
    if s == 0:
        return x
    out = np.zeros_like(x)
    if s < x.shape[-1]:
        out[..., :-s] = x[..., s:]
    return out


def conv1d_dilated_causal(x, weight, bias=None, dilation: int = 1) -> np.ndarray:
    """Dilated causal convolution ``y[t] = b + sum_i w[:, :, i] @ x[t - d*i]``."""
    x = _as_series(x)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 3 or weight.shape[2] < 1:
        raise ShapeError(f"kernel must be (C_out, C_in, k), got {weight.shape}")
    if weight.shape[1] != x.shape[-2]:
        raise ShapeError(
            f"kernel expects {weight.shape[1]} input channels, series has {x.shape[-2]}"
        )
    if int(dilation) != dilation or dilation < 1:
        raise ParameterError(f"dilation must be an integer >= 1, got {dilation}")
    dilation = int(dilation)

    out = None
    for i in range(weight.shape[2]):
        term = np.matmul(weight[:, :, i], _shift(x, dilation * i))
        out = term if out is None else out + term
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None]
    return out


def conv1d_backward(x, weight, dilation: int, dy):
    """Gradients of ``sum(dy * conv(x))`` w.r.t. input, weight and bias.

    Returns ``(dx, dw, db)``.
    """
    x = _as_series(x)
    weight = np.asarray(weight, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    expected = x.shape[:-2] + (weight.shape[0], x.shape[-1])
    if dy.shape != expected:
        raise ShapeError(f"dy has shape {dy.shape}, expected {expected}")
    if weight.shape[1] != x.shape[-2]:
        raise ShapeError("kernel/series channel mismatch")

    dx = np.zeros_like(x)
    dw = np.empty_like(weight)
    batch_axes = tuple(range(dy.ndim - 2))
    for i in range(weight.shape[2]):
        s = dilation * i
        dx += _advance(np.matmul(weight[:, :, i].T, dy), s)
        prod = np.matmul(dy, np.swapaxes(_shift(x, s), -1, -2))
        dw[:, :, i] = prod.sum(axis=batch_axes) if batch_axes else prod
    db = dy.sum(axis=batch_axes + (dy.ndim - 1,))
    return dx, dw, db


def selu(x):
    x = np.asarray(x, dtype=np.float64)
    # expm1 on the clipped argument avoids overflow warnings on the unused branch
    neg = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    return SELU_LAMBDA * np.where(x > 0, x, neg)


def selu_backward(x, dy):
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if x.shape != dy.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {dy.shape}")
    slope = np.where(x > 0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(x, 0.0)))
    return dy * slope


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, dy):
    return np.where(np.asarray(x) > 0, dy, 0.0)


def _channel_norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=tuple(range(1, v.ndim))))


def weight_norm_apply(v, g) -> np.ndarray:
    """Reparameterize ``w[c] = g[c] * v[c] / ||v[c]||`` per output channel."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (v.shape[0],):
        raise ShapeError(f"gain must have shape ({v.shape[0]},), got {g.shape}")
    norms = _channel_norms(v)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise FloatingPointError("weight-norm direction has a zero-norm output channel")
    scale = (g / norms).reshape((-1,) + (1,) * (v.ndim - 1))
    return v * scale


def weight_norm_backward(v, g, dw):
    """Map a gradient w.r.t. the effective weight onto ``(dv, dg)``."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    norms = _channel_norms(v)
    shape = (-1,) + (1,) * (v.ndim - 1)
    unit = v / norms.reshape(shape)
    axes = tuple(range(1, v.ndim))
    dg = np.sum(dw * unit, axis=axes)
    dv = (g / norms).reshape(shape) * (dw - dg.reshape(shape) * unit)
    return dv, dg


def channel_dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep-mask for spatial dropout, one entry per (batch, channel), pre-scaled."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"drop probability must lie in [0, 1), got {p}")
    mask_shape = tuple(shape[:-1]) + (1,)
    if p == 0.0:
        return np.ones(mask_shape)
    keep = rng.random(mask_shape) >= p
    return keep / (1.0 - p)


def spatial_dropout(x, p: float, training: bool, rng: np.random.Generator | None = None):
    """Zero whole channels with probability ``p`` during training."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"drop probability must lie in [0, 1), got {p}")
    x = np.asarray(x, dtype=np.float64)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("training-mode dropout needs an explicit generator")
    return x * channel_dropout_mask(x.shape, p, rng)
