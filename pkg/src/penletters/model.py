"""Declarative architecture description and the network built from it.

The default :class:`ModelSpec` is CNN-LSTM-Net12: eight 1-D convolutions
(``conv1`` .. ``conv9``, there is no ``conv7``), an exponential layer after
``conv3``, two max-pools, a single LSTM read at its last step and a linear
classifier over 52 letters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor
from .exceptions import ShapeError
from .functional import conv_output_length, pool_output_length
from .layers import LSTM, BatchNorm1d, Conv1d, ExpLayer, Linear, MaxPool1d, Module

__all__ = ["LayerSpec", "ModelSpec", "CNNLSTMNet", "NET12_LAYERS"]

LAYER_KINDS = ("conv", "exp", "maxpool", "lstm", "linear")


@dataclass(frozen=True)
class LayerSpec:
    """One row of the architecture table.

    ``padding=None`` on a convolution means ``kernel // 2`` (length preserving
    at stride 1).  ``relu`` and ``batchnorm`` describe what follows the conv.
    """

    name: str
    kind: str
    kernel: int = 0
    channels: int = 0
    stride: int = 1
    padding: Optional[int] = None
    relu: bool = False
    batchnorm: bool = False
    hidden: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "maxpool") and (self.kernel < 1 or self.stride < 1):
            raise ValueError(f"{self.name}: kernel and stride must be >= 1")

    @property
    def resolved_padding(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


def _conv(name: str, kernel: int, channels: int, stride: int = 1, padding: Optional[int] = None,
          block: bool = True) -> LayerSpec:
    return LayerSpec(name, "conv", kernel=kernel, channels=channels, stride=stride,
                     padding=padding, relu=block, batchnorm=block)


NET12_LAYERS: tuple[LayerSpec, ...] = (
    _conv("conv1", 11, 32, stride=2, padding=5),
    _conv("conv2", 11, 32),
    _conv("conv3", 11, 32, block=False),
    LayerSpec("exp", "exp"),
    _conv("conv4", 5, 64),
    LayerSpec("maxpool1", "maxpool", kernel=7, stride=3),
    _conv("conv5", 5, 64),
    LayerSpec("maxpool2", "maxpool", kernel=7, stride=3),
    _conv("conv6", 3, 128),
    _conv("conv8", 3, 128),
    _conv("conv9", 3, 128),
    LayerSpec("lstm1", "lstm", hidden=256),
    LayerSpec("fc", "linear"),
)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...] = NET12_LAYERS
    input_channels: int = 12
    class_count: int = 52
    exp_mode: str = "signed"

    def __post_init__(self) -> None:
        if self.exp_mode not in ("signed", "plain"):
            raise ValueError(f"exp_mode must be 'signed' or 'plain', got {self.exp_mode!r}")
        if self.input_channels < 1 or self.class_count < 1:
            raise ValueError("input_channels and class_count must be positive")
        kinds = [layer.kind for layer in self.layers]
        if kinds.count("lstm") != 1 or kinds[-1] != "linear" or kinds[-2] != "lstm":
            raise ValueError("layers must end with exactly one lstm followed by the linear classifier")

    @classmethod
    def reduced(cls, input_channels: int = 3, widths: tuple[int, ...] = (2, 2, 2, 3, 3, 4, 4, 4),
                hidden: int = 4, pool: tuple[int, int] = (3, 2), class_count: int = 52,
                exp_mode: str = "signed") -> "ModelSpec":
        """Same layer sequence with narrow convolutions, a tiny LSTM and short
        pools, so that 32-sample inputs stay non-degenerate."""
        convs = iter(widths)
        layers = []
        for layer in NET12_LAYERS:
            if layer.kind == "conv":
                layer = replace(layer, channels=next(convs))
            elif layer.kind == "maxpool":
                layer = replace(layer, kernel=pool[0], stride=pool[1])
            elif layer.kind == "lstm":
                layer = replace(layer, hidden=hidden)
            layers.append(layer)
        return cls(tuple(layers), input_channels, class_count, exp_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = tuple(LayerSpec(**layer) for layer in d["layers"])
        return cls(layers, int(d["input_channels"]), int(d["class_count"]), d.get("exp_mode", "signed"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def length_chain(self, length: int) -> list[tuple[str, int]]:
        """Sequence length after every conv/pool layer for an input of ``length``.

        Raises :class:`ShapeError` if some layer would see a window longer
        than its input.
        """
        chain = []
        for layer in self.layers:
            if layer.kind == "conv":
                pad = layer.resolved_padding
                if length + 2 * pad < layer.kernel:
                    raise ShapeError(f"{layer.name}: length {length} too short for kernel {layer.kernel}")
                length = conv_output_length(length, layer.kernel, layer.stride, pad)
            elif layer.kind == "maxpool":
                if length < layer.kernel:
                    raise ShapeError(f"{layer.name}: length {length} too short for pool {layer.kernel}")
                length = pool_output_length(length, layer.kernel, layer.stride)
            else:
                continue
            chain.append((layer.name, length))
        return chain


class CNNLSTMNet(Module):
    """Network instantiated from a :class:`ModelSpec` with seeded initialisation."""

    def __init__(self, spec: ModelSpec = ModelSpec(), seed: int = 0) -> None:
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.blocks: list[tuple[LayerSpec, list[tuple[str, Module]]]] = []
        channels = spec.input_channels
        for layer in spec.layers:
            parts: list[tuple[str, Module]] = []
            if layer.kind == "conv":
                parts.append(("", Conv1d(channels, layer.channels, layer.kernel, layer.stride,
                                         layer.resolved_padding, rng)))
                channels = layer.channels
                if layer.relu:
                    parts.append(("relu", _ReLU()))
                if layer.batchnorm:
                    parts.append(("bn", BatchNorm1d(channels)))
            elif layer.kind == "exp":
                parts.append(("", ExpLayer(spec.exp_mode)))
            elif layer.kind == "maxpool":
                parts.append(("", MaxPool1d(layer.kernel, layer.stride)))
            elif layer.kind == "lstm":
                parts.append(("", LSTM(channels, layer.hidden, rng)))
                channels = layer.hidden
            elif layer.kind == "linear":
                parts.append(("", Linear(channels, spec.class_count, rng)))
                channels = spec.class_count
            self.blocks.append((layer, parts))

    def _modules(self) -> Iterator[tuple[str, Module]]:
        for layer, parts in self.blocks:
            for suffix, module in parts:
                yield (f"{layer.name}.{suffix}" if suffix else layer.name), module

    def named_parameters(self):
        for prefix, module in self._modules():
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def named_buffers(self):
        for prefix, module in self._modules():
            for name, b in module.named_buffers():
                yield f"{prefix}.{name}", b

    def train(self, mode: bool = True) -> "CNNLSTMNet":
        self.training = mode
        for _, module in self._modules():
            module.train(mode)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        """Raw logits ``[B, class_count]`` for input ``[B, C_in, L]``.

        If ``trace`` is a list, ``(layer name, output shape)`` pairs are
        appended to it.
        """
        if x.ndim != 3:
            raise ShapeError(f"model expects [B, C, L] input, got {x.shape}")
        if x.shape[1] != self.spec.input_channels:
            raise ShapeError(f"model expects {self.spec.input_channels} channels, got {x.shape[1]}")
        self.spec.length_chain(x.shape[2])
        for layer, parts in self.blocks:
            if layer.kind == "lstm":
                x = x.transpose(0, 2, 1)
            for _, module in parts:
                x = module(x)
            if trace is not None:
                trace.append((layer.name, x.shape))
        return x


class _ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.relu()
