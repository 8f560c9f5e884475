"""Fused differentiable kernels used by the network layers.

Each kernel computes its forward pass in numpy and records one node with a
hand-written backward rule, which keeps the tape short for convolutions and
normalisation.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, record
from .exceptions import ShapeError

__all__ = [
    "conv1d",
    "conv_output_length",
    "pool_output_length",
    "max_pool1d",
    "batch_norm1d",
    "linear",
    "cross_entropy",
    "softmax",
]


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def pool_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation of ``x [B, C_in, L]`` with ``weight [C_out, C_in, k]``.

    Zero padding on both ends; no kernel flip.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects [B, C, L] input, got {x.shape}")
    xd, wd = x.data, weight.data
    B, C, L = xd.shape
    O, C_w, k = wd.shape
    if C != C_w:
        raise ShapeError(f"conv1d: input has {C} channels, kernel expects {C_w}")
    if L + 2 * padding < k:
        raise ShapeError(f"conv1d: window {k} larger than padded input {L + 2 * padding}")
    L_out = conv_output_length(L, k, stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    windows = sliding_window_view(xp, k, axis=2)[:, :, : stride * (L_out - 1) + 1 : stride, :]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(B * L_out, C * k)
    w2 = wd.reshape(O, C * k)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, L_out, O).transpose(0, 2, 1))

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * L_out, O)
        dw = (g2.T @ cols).reshape(O, C, k)
        grads = [_conv1d_input_grad(g, wd, L, stride, padding) if x.requires_grad else None, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv1d", out, inputs, bw)


def _conv1d_input_grad(g: np.ndarray, w: np.ndarray, L: int, stride: int, padding: int) -> np.ndarray:
    # full correlation of the (stride-dilated) output gradient with the flipped kernel
    B, O, L_out = g.shape
    _, C, k = w.shape
    span = stride * (L_out - 1) + 1
    if stride > 1:
        dilated = np.zeros((B, O, span), dtype=g.dtype)
        dilated[:, :, ::stride] = g
    else:
        dilated = g
    padded_len = L + 2 * padding
    gp = np.pad(dilated, ((0, 0), (0, 0), (k - 1, padded_len - span)))
    windows = sliding_window_view(gp, k, axis=2)[:, :, padding : padding + L, :]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(B * L, O * k)
    w_flip = np.ascontiguousarray(w[:, :, ::-1].transpose(0, 2, 1)).reshape(O * k, C)
    return np.ascontiguousarray((cols @ w_flip).reshape(B, L, C).transpose(0, 2, 1))


def max_pool1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Windowed maximum over the last axis, no padding; ties go to the first element."""
    if x.ndim != 3:
        raise ShapeError(f"max_pool1d expects [B, C, L] input, got {x.shape}")
    xd = x.data
    L = xd.shape[2]
    if L < kernel:
        raise ShapeError(f"max_pool1d: input length {L} shorter than kernel {kernel}")
    L_out = pool_output_length(L, kernel, stride)
    span = stride * (L_out - 1) + 1
    windows = sliding_window_view(xd, kernel, axis=2)[:, :, :span:stride, :]
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros_like(xd)
        for j in range(kernel):
            dx[:, :, j : j + span : stride] += np.where(idx == j, g, 0)
        return (dx,)

    return record("max_pool1d", np.ascontiguousarray(out), (x,), bw)


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of ``x [B, C, L]`` over batch and length.

    In training mode the batch statistics are used (variance with 1/N) and
    ``running_mean``/``running_var`` are updated in place with ``momentum``;
    the running variance tracks the unbiased estimate.
    """
    if x.ndim != 3:
        raise ShapeError(f"batch_norm1d expects [B, C, L] input, got {x.shape}")
    xd = x.data
    B, C, L = xd.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm1d: {C} channels but affine shapes {gamma.shape}, {beta.shape}")
    n = B * L
    g_ = gamma.data[None, :, None]
    if training:
        if n < 2:
            raise ValueError("batch_norm1d in training mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2))
        centered = xd - mean[None, :, None]
        var = (centered * centered).mean(axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[None, :, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None]) * inv_std[None, :, None]
    inv_std = inv_std.astype(xd.dtype, copy=False)
    xhat = xhat.astype(xd.dtype, copy=False)
    out = g_ * xhat + beta.data[None, :, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2))
        dbeta = g.sum(axis=(0, 2))
        dxhat = g * g_
        if training:
            s1 = dxhat.sum(axis=(0, 2))[None, :, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
            dx = (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[None, :, None]
        return dx, dgamma, dbeta

    return record("batch_norm1d", out, (x, gamma, beta), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x [B, in] @ weight[out, in]^T + bias[out]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out += bias.data

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    B, K = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != B:
        raise ShapeError(f"cross_entropy: {B} rows of logits but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= K):
        raise ValueError(f"cross_entropy: target outside [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    nll = log_norm - z[rows, t]
    out = np.asarray([nll.mean()], dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - log_norm[:, None])
        p[rows, t] -= 1.0
        return ((g.reshape(()) / B) * p,)

    return record("cross_entropy", out, (logits,), bw)
