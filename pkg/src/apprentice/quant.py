"""Ternary and k-bit fake quantization with straight-through gradients."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _make

WEIGHT_BITS = (2, 4, 8, 32)
ACT_BITS = (8, 32)
TERNARY_THRESHOLD = 0.7


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (``np.round`` is ties-to-even)."""
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole  # exact in binary floating point
    return whole + np.sign(x) * (np.abs(frac) >= 0.5)


@dataclass(frozen=True)
class QuantSpec:
    """Activation/weight precision policy, written ``"8A,2W"``.

    32 bits means full precision; 2-bit weights are ternary.
    """

    weight_bits: int = 32
    act_bits: int = 32
    exempt_first_last: bool = True

    def __post_init__(self):
        if self.weight_bits not in WEIGHT_BITS:
            raise ValueError(f"weight bits must be one of {WEIGHT_BITS}, got {self.weight_bits}")
        if self.act_bits not in ACT_BITS:
            raise ValueError(f"activation bits must be one of {ACT_BITS}, got {self.act_bits}")

    _PATTERN = re.compile(r"^\s*(\d+)\s*A\s*,\s*(\d+)\s*W\s*$", re.IGNORECASE)

    @classmethod
    def parse(cls, text: str, exempt_first_last: bool = True) -> QuantSpec:
        m = cls._PATTERN.match(text)
        if not m:
            raise ValueError(f"cannot parse precision {text!r}; expected e.g. '8A,4W'")
        return cls(weight_bits=int(m.group(2)), act_bits=int(m.group(1)), exempt_first_last=exempt_first_last)

    def __str__(self) -> str:
        return f"{self.act_bits}A,{self.weight_bits}W"

    @property
    def is_full_precision(self) -> bool:
        return self.weight_bits == 32 and self.act_bits == 32


FULL_PRECISION = QuantSpec()


# ---------------------------------------------------------------------------
# quantizers on raw arrays
# ---------------------------------------------------------------------------

@dataclass
class TernaryTensor:
    codes: np.ndarray  # int8 in {-1, 0, 1}
    scale: float

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        return (self.scale * self.codes.astype(np.float64)).astype(dtype)


def ternary_quantize(w) -> TernaryTensor:
    """Threshold at ``0.7 * mean|w|``; scale is the mean magnitude of survivors.

    Sums use ``math.fsum`` so the result does not depend on summation order.
    """
    arr = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot ternarize an empty tensor")
    mag = np.abs(arr)
    delta = TERNARY_THRESHOLD * (math.fsum(mag.ravel()) / mag.size)
    keep = mag > delta
    count = int(keep.sum())
    codes = (np.sign(arr) * keep).astype(np.int8)
    scale = math.fsum(mag[keep]) / count if count else 0.0
    return TernaryTensor(codes=codes, scale=scale)


def weight_grid_indices(w, bits: int) -> np.ndarray:
    """Signed grid indices in ``[-s, s]`` with ``s = 2**(bits-1) - 1``."""
    if bits not in (4, 8):
        raise ValueError(f"k-bit weight quantization supports 4 or 8 bits, got {bits}")
    s = 2 ** (bits - 1) - 1
    arr = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    return round_half_away(np.clip(arr, -1.0, 1.0) * s).astype(np.int64)


def kbit_quantize_weights(w, bits: int) -> np.ndarray:
    s = 2 ** (bits - 1) - 1
    arr = np.asarray(w.data if isinstance(w, Tensor) else w)
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    return (weight_grid_indices(arr, bits) / s).astype(dtype)


def kbit_quantize_acts(a, bits: int) -> np.ndarray:
    if bits != 8:
        raise ValueError(f"activation quantization supports 8 bits, got {bits}")
    s = 2 ** bits - 1
    arr = np.asarray(a.data if isinstance(a, Tensor) else a)
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    q = round_half_away(np.clip(arr.astype(np.float64), 0.0, 1.0) * s) / s
    return q.astype(dtype)


# ---------------------------------------------------------------------------
# fake-quantization nodes
# ---------------------------------------------------------------------------

class QuantNode:
    """A fake-quantization op inserted into the forward path of a layer.

    ``kind`` is ``"ternary"``, ``"weight"`` (k-bit, clip range [-1, 1]) or
    ``"act"`` (k-bit, clip range [0, 1]).  The latent input stays full
    precision; only the forward value is quantized.
    """

    def __init__(self, kind: str, bits: int):
        if kind not in ("ternary", "weight", "act"):
            raise ValueError(f"unknown quantization node kind {kind!r}")
        self.kind = kind
        self.bits = bits

    def __repr__(self) -> str:
        return f"QuantNode({self.kind}, {self.bits} bits)"

    def quantize(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "ternary":
            return ternary_quantize(x).dequantize(x.dtype)
        if self.kind == "weight":
            return kbit_quantize_weights(x, self.bits)
        return kbit_quantize_acts(x, self.bits)

    def ste_backward(self, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the pre-quantization input ``x``."""
        if self.kind == "ternary":
            return upstream
        lo = -1.0 if self.kind == "weight" else 0.0
        inside = (x >= lo) & (x <= 1.0)
        return upstream * inside

    def __call__(self, x: Tensor) -> Tensor:
        q = self.quantize(x.data)
        return _make(q, (x,), lambda g: x._accumulate(self.ste_backward(x.data, g)), f"quant_{self.kind}")


def ste_backward(node: QuantNode, x, upstream) -> np.ndarray:
    return node.ste_backward(np.asarray(x), np.asarray(upstream))


def weight_node(bits: int) -> QuantNode | None:
    if bits == 32:
        return None
    if bits == 2:
        return QuantNode("ternary", 2)
    return QuantNode("weight", bits)


def act_node(bits: int) -> QuantNode | None:
    return None if bits == 32 else QuantNode("act", bits)


def apply_policy(model, spec: QuantSpec):
    """Attach quantization nodes to ``model`` in place and return it.

    Weight nodes go on every conv/linear layer except the first and last
    when ``spec.exempt_first_last``; activation nodes go after every ReLU.
    Any previously attached nodes are replaced.
    """
    layers = model.weight_layers()
    acts = model.activations()
    if spec.exempt_first_last and not spec.is_full_precision and len(layers) <= 2:
        raise ValueError(
            f"first/last-layer exemption needs at least 3 weight layers, model has {len(layers)}"
        )
    for i, layer in enumerate(layers):
        exempt = spec.exempt_first_last and i in (0, len(layers) - 1)
        layer.weight_quant = None if exempt else weight_node(spec.weight_bits)
    for act in acts:
        act.act_quant = act_node(spec.act_bits)
    model.quant_spec = spec
    return model


def count_quant_nodes(model) -> tuple[int, int]:
    """(weight nodes, activation nodes) currently attached to ``model``."""
    w = sum(layer.weight_quant is not None for layer in model.weight_layers())
    a = sum(act.act_quant is not None for act in model.activations())
    return w, a
