"""Parameterised layers of the convolutional-recurrent letter classifier."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .autodiff import Tensor, get_dtype
from .exceptions import ShapeError

__all__ = [
    "Module",
    "Conv1d",
    "BatchNorm1d",
    "MaxPool1d",
    "ExpLayer",
    "LSTM",
    "Linear",
    "uniform_init",
]


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal container: named parameters, named buffers and a train/eval flag."""

    training = True

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None) -> None:
        if kernel < 1 or stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        if not 0 <= padding < kernel:
            raise ValueError(f"padding must lie in [0, kernel), got {padding} for kernel {kernel}")
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = uniform_init(rng, (out_channels, in_channels, kernel), in_channels * kernel)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def named_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, self.stride, self.padding)

    def output_length(self, length: int) -> int:
        return F.conv_output_length(length, self.kernel, self.stride, self.padding)


class BatchNorm1d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> None:
        if eps <= 0:
            raise ValueError("eps must be positive")
        dtype = get_dtype()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class MaxPool1d(Module):
    def __init__(self, kernel: int, stride: int) -> None:
        self.kernel, self.stride = kernel, stride

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool1d(x, self.kernel, self.stride)

    def output_length(self, length: int) -> int:
        return F.pool_output_length(length, self.kernel, self.stride)


class ExpLayer(Module):
    """Maps activations back from log-compressed range.

    ``mode="signed"`` applies ``sign(x) * (exp(|x|) - 1)``, the inverse of the
    signed-log input scaling; ``mode="plain"`` applies ``exp(x)``.
    """

    def __init__(self, mode: str = "signed") -> None:
        if mode not in ("signed", "plain"):
            raise ValueError(f"exp mode must be 'signed' or 'plain', got {mode!r}")
        self.mode = mode

    def forward(self, x: Tensor) -> Tensor:
        return x.exp1m_signed() if self.mode == "signed" else x.exp()


class LSTM(Module):
    """Single-layer LSTM returning only the final hidden state.

    Gates are stacked in the order (input, forget, cell candidate, output) in
    ``weight_ih [4H, F]``, ``weight_hh [4H, H]`` and the two bias vectors.
    """

    def __init__(self, input_size: int, hidden: int, rng: np.random.Generator | None = None,
                 forget_bias: float = 1.0) -> None:
        rng = rng or np.random.default_rng(0)
        self.input_size, self.hidden = input_size, hidden
        self.weight_ih = uniform_init(rng, (4 * hidden, input_size), input_size)
        self.weight_hh = uniform_init(rng, (4 * hidden, hidden), hidden)
        b_ih = np.zeros(4 * hidden)
        b_ih[hidden : 2 * hidden] = forget_bias
        self.bias_ih = Tensor(b_ih, requires_grad=True)
        self.bias_hh = Tensor(np.zeros(4 * hidden), requires_grad=True)

    def named_parameters(self):
        yield "weight_ih", self.weight_ih
        yield "weight_hh", self.weight_hh
        yield "bias_ih", self.bias_ih
        yield "bias_hh", self.bias_hh

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeError(f"LSTM expects [B, T, {self.input_size}] input, got {x.shape}")
        B, T, _ = x.shape
        if T < 1:
            raise ShapeError("LSTM needs at least one time step")
        H = self.hidden
        # input projections for all steps at once
        proj = F.linear(x.reshape(B * T, self.input_size), self.weight_ih, self.bias_ih)
        proj = proj.reshape(B, T, 4 * H)
        h = Tensor(np.zeros((B, H), dtype=x.dtype))
        c = Tensor(np.zeros((B, H), dtype=x.dtype))
        for t in range(T):
            gates = proj[:, t, :] + F.linear(h, self.weight_hh, self.bias_hh)
            i = gates[:, 0:H].sigmoid()
            f = gates[:, H : 2 * H].sigmoid()
            g = gates[:, 2 * H : 3 * H].tanh()
            o = gates[:, 3 * H : 4 * H].sigmoid()
            c = f * c + i * g
            h = o * c.tanh()
        return h


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None) -> None:
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = uniform_init(rng, (out_features, in_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def named_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
