"""Model zoo: pre-activation CIFAR ResNets (6n+2) and small MNIST networks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import (BatchNorm, Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2d, Module, ReLU,
                 Sequential)
from .quant import FULL_PRECISION

FAMILIES = ("cifar_resnet", "mnist_mlp", "mnist_convnet")
STAGE_FILTERS = (16, 32, 64)


@dataclass(frozen=True)
class ModelSpec:
    family: str
    n: int = 3
    widths: tuple[int, ...] = field(default_factory=tuple)
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; choose from {FAMILIES}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.family == "cifar_resnet" and self.n < 1:
            raise ValueError(f"ResNet block multiplier n must be >= 1, got {self.n}")
        if self.family == "mnist_mlp":
            if len(self.widths) < 2:
                raise ValueError("mnist_mlp widths need at least input and output sizes")
            if self.widths[-1] != self.num_classes:
                raise ValueError(f"last MLP width {self.widths[-1]} != num_classes {self.num_classes}")
        if self.family == "mnist_convnet" and len(self.widths) != 3:
            raise ValueError("mnist_convnet widths are [conv1 channels, conv2 channels, hidden units]")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (3, 32, 32) if self.family == "cifar_resnet" else (1, 28, 28)

    @property
    def weight_layer_count(self) -> int:
        if self.family == "cifar_resnet":
            return 6 * self.n + 2
        if self.family == "mnist_mlp":
            return len(self.widths) - 1
        return 4

    def to_json(self) -> str:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ModelSpec:
        d = json.loads(text)
        return cls(family=d["family"], n=d["n"], widths=tuple(d["widths"]), num_classes=d["num_classes"])


class Network(Module):
    """A built model: ``body`` maps images to logits."""

    def __init__(self, spec: ModelSpec, body: Module):
        self.spec = spec
        self.body = body
        self.quant_spec = FULL_PRECISION

    def forward(self, x):
        return self.body(x)


class PreActBlock(Module):
    """BN -> ReLU -> conv, twice, plus a parameter-free shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng):
        self.bn1 = BatchNorm(in_ch)
        self.relu1 = ReLU()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng)
        self.bn2 = BatchNorm(out_ch)
        self.relu2 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng)
        self.out_ch, self.stride = out_ch, stride
        self.downsample = stride != 1 or in_ch != out_ch

    def forward(self, x):
        h = self.conv1(self.relu1(self.bn1(x)))
        h = self.conv2(self.relu2(self.bn2(h)))
        short = T.pad_channels_stride(x, self.out_ch, self.stride) if self.downsample else x
        return h + short


def build_cifar_resnet(n: int, num_classes: int = 10, seed: int = 0) -> Network:
    spec = ModelSpec("cifar_resnet", n=n, num_classes=num_classes)
    rng = np.random.default_rng(seed)
    layers: list[Module] = [Conv2d(3, STAGE_FILTERS[0], 3, 1, 1, rng)]
    in_ch = STAGE_FILTERS[0]
    for stage, filters in enumerate(STAGE_FILTERS):
        for b in range(n):
            stride = 2 if stage > 0 and b == 0 else 1
            layers.append(PreActBlock(in_ch, filters, stride, rng))
            in_ch = filters
    layers += [BatchNorm(in_ch), ReLU(), GlobalAvgPool(), Linear(in_ch, num_classes, rng)]
    return Network(spec, Sequential(*layers))


def build_mnist_model(spec: ModelSpec, seed: int = 0) -> Network:
    rng = np.random.default_rng(seed)
    if spec.family == "mnist_mlp":
        layers: list[Module] = [Flatten()]
        w = spec.widths
        for i in range(len(w) - 1):
            layers.append(Linear(w[i], w[i + 1], rng))
            if i < len(w) - 2:
                layers.append(ReLU())
        return Network(spec, Sequential(*layers))
    if spec.family == "mnist_convnet":
        c1, c2, hidden = spec.widths
        layers = [
            Conv2d(1, c1, 3, 1, 1, rng), BatchNorm(c1), ReLU(), MaxPool2d(2),
            Conv2d(c1, c2, 3, 1, 1, rng), BatchNorm(c2), ReLU(), MaxPool2d(2),
            Flatten(), Linear(c2 * 7 * 7, hidden, rng), ReLU(), Linear(hidden, spec.num_classes, rng),
        ]
        return Network(spec, Sequential(*layers))
    raise ValueError(f"{spec.family!r} is not an MNIST family")


def build_model(spec: ModelSpec, seed: int = 0) -> Network:
    if spec.family == "cifar_resnet":
        return build_cifar_resnet(spec.n, spec.num_classes, seed)
    return build_mnist_model(spec, seed)


def count_params_and_layers(model: Module) -> tuple[int, int, list[tuple[str, tuple[int, ...]]]]:
    """(trainable parameter count, weight-layer count, per-parameter shapes in build order)."""
    shapes = [(name, p.shape) for name, p in model.named_parameters()]
    total = sum(int(np.prod(s)) for _, s in shapes)
    return total, len(model.weight_layers()), shapes


def expected_param_count(spec: ModelSpec) -> int:
    """Parameter count derived from the spec alone (independent of the built graph)."""
    if spec.family == "mnist_mlp":
        w = spec.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))
    if spec.family == "mnist_convnet":
        c1, c2, h = spec.widths
        return (9 * c1 + 2 * c1) + (9 * c1 * c2 + 2 * c2) + (49 * c2 * h + h) + (h * spec.num_classes + spec.num_classes)
    total = 9 * 3 * 16
    in_ch = 16
    for filters in STAGE_FILTERS:
        for _ in range(spec.n):
            total += 2 * in_ch + 9 * in_ch * filters + 2 * filters + 9 * filters * filters
            in_ch = filters
    return total + 2 * in_ch + in_ch * spec.num_classes + spec.num_classes


def capacity(model: Module) -> tuple[int, int]:
    count, depth, _ = count_params_and_layers(model)
    return depth, count
