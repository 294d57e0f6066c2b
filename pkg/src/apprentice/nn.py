"""Layers and a small module tree on top of :mod:`apprentice.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    training = True

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def modules(self) -> Iterator[Module]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._param_names():
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names():
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def _param_names(self) -> tuple[str, ...]:
        return ()

    def _buffer_names(self) -> tuple[str, ...]:
        return ()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def weight_layers(self) -> list[Module]:
        return [m for m in self.modules() if isinstance(m, (Conv2d, Linear))]

    def activations(self) -> list[ReLU]:
        return [m for m in self.modules() if isinstance(m, ReLU)]

    def astype(self, dtype) -> Module:
        """Cast parameters and buffers in place (exact when widening)."""
        for m in self.modules():
            for name in m._param_names():
                p = getattr(m, name)
                p.data = p.data.astype(dtype)
                p.grad = None
            for name in m._buffer_names():
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


def _fan_in_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    # variance 1/(3 fan_in); the ReLU gain of 2/fan_in overfits the small MNIST sets
    std = np.sqrt(1.0 / (3.0 * fan_in))
    return Tensor(rng.standard_normal(shape).astype(np.float32) * np.float32(std), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, pad: int = 1,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.pad = stride, pad
        self.floor = stride > 1
        self.weight = _fan_in_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        self.weight_quant = None
        self.packed = None

    def _param_names(self):
        return ("weight",)

    def forward(self, x: Tensor) -> Tensor:
        if self.packed is not None:
            from .deploy import packed_conv2d
            return Tensor(packed_conv2d(x.data, self.packed, self.stride, self.pad, self.floor))
        w = self.weight_quant(self.weight) if self.weight_quant is not None else self.weight
        return T.conv2d(x, w, self.stride, self.pad, self.floor)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        # stored [in, out] so the forward is x @ W
        self.weight = _fan_in_normal(rng, (in_features, out_features), in_features)
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)
        self.weight_quant = None
        self.packed = None

    def _param_names(self):
        return ("weight", "bias")

    def forward(self, x: Tensor) -> Tensor:
        if self.packed is not None:
            from .deploy import packed_linear
            return Tensor(packed_linear(x.data, self.packed) + self.bias.data)
        w = self.weight_quant(self.weight) if self.weight_quant is not None else self.weight
        return T.matmul(x, w) + self.bias


class BatchNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def _param_names(self):
        return ("gamma", "beta")

    def _buffer_names(self):
        return ("running_mean", "running_var")

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class ReLU(Module):
    def __init__(self):
        self.act_quant = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.relu(x)
        return self.act_quant(y) if self.act_quant is not None else y


class MaxPool2d(Module):
    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x):
        return T.max_pool2d(x, self.size)


class Flatten(Module):
    def forward(self, x):
        return T.flatten(x)


class GlobalAvgPool(Module):
    def forward(self, x):
        return T.global_avg_pool(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def children(self):
        for i, layer in enumerate(self.layers):
            yield str(i), layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
