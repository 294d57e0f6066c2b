"""Packed low-precision weights, inference kernels and memory-footprint analysis.

Quantized export container (``APQZ``), little-endian throughout::

    magic "APQZ" | u32 version | u32 record count | records

    record: u16 name len + UTF-8 name | u8 rank | rank x u32 extents | u8 bits
            | f64 scale | u64 payload bytes + payload

``bits`` is 2 (ternary codes), 4 or 8 (signed grid indices, two's complement)
or 32 (raw float32 values of a full-precision tensor).  ``scale`` is the
per-layer magnitude for ternary layers, the grid step for k-bit layers and
1.0 for full-precision records.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .io_formats import FormatError, _Reader, _set_buffer, state_items
from .models import ModelSpec, Network, build_model
from .quant import QuantSpec, apply_policy, ternary_quantize, weight_grid_indices
from .tensor import Tensor, im2col, no_grad

EXPORT_MAGIC = b"APQZ"
EXPORT_VERSION = 1
PACKABLE_BITS = (2, 4, 8)

# ternary code table: 0 -> 00, +1 -> 01, -1 -> 10 (11 invalid)
_TERNARY_ENCODE = {0: 0b00, 1: 0b01, -1: 0b10}


@dataclass
class PackedTensor:
    bits: int
    payload: bytes
    shape: tuple[int, ...]
    scale: float

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.bits not in PACKABLE_BITS:
            raise ValueError(f"cannot pack at {self.bits} bits; supported: {PACKABLE_BITS}")
        need = math.ceil(self.numel * self.bits / 8)
        if len(self.payload) != need:
            raise ValueError(f"payload has {len(self.payload)} bytes, shape {self.shape} at {self.bits} bits needs {need}")

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @cached_property
    def values(self) -> np.ndarray:
        """Decoded codes (ternary) or signed grid indices, shaped like the source."""
        return unpack(self)

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def pack(values, bits: int, scale: float = 1.0) -> PackedTensor:
    """Pack integer codes LSB-first: element 0 sits in the low bits of byte 0.

    ``bits == 2`` takes ternary codes in {-1, 0, 1}; 4 and 8 take signed
    grid indices in ``[-(2**(bits-1) - 1), 2**(bits-1) - 1]``.
    """
    arr = np.asarray(values)
    shape = arr.shape
    flat = arr.reshape(-1).astype(np.int64)
    if bits == 2:
        bad = np.nonzero((flat < -1) | (flat > 1))[0]
        fields = np.where(flat == -1, 0b10, flat).astype(np.uint8)
    elif bits in (4, 8):
        lim = 2 ** (bits - 1) - 1
        bad = np.nonzero((flat < -lim) | (flat > lim))[0]
        fields = (flat & ((1 << bits) - 1)).astype(np.uint8)
    else:
        raise ValueError(f"cannot pack at {bits} bits; supported: {PACKABLE_BITS}")
    if len(bad):
        raise ValueError(f"element {int(bad[0])} = {int(flat[bad[0]])} not representable at {bits} bits")
    per = 8 // bits
    padded = np.zeros(math.ceil(flat.size / per) * per, dtype=np.uint8)
    padded[:flat.size] = fields
    grouped = padded.reshape(-1, per).astype(np.uint16)
    shifts = (np.arange(per) * bits).astype(np.uint16)
    payload = (grouped << shifts).sum(axis=1).astype(np.uint8).tobytes()
    return PackedTensor(bits, payload, shape, float(scale))


def unpack(packed: PackedTensor) -> np.ndarray:
    bits = packed.bits
    per = 8 // bits
    raw = np.frombuffer(packed.payload, dtype=np.uint8)
    shifts = (np.arange(per) * bits).astype(np.uint8)
    fields = ((raw[:, None] >> shifts) & ((1 << bits) - 1)).reshape(-1)[:packed.numel].astype(np.int64)
    if bits == 2:
        if np.any(fields == 0b11):
            raise ValueError("invalid ternary code 11 in payload")
        out = np.where(fields == 0b10, -1, fields)
    else:
        out = np.where(fields >= 1 << (bits - 1), fields - (1 << bits), fields)
    return out.astype(np.int8 if bits <= 8 else np.int64).reshape(packed.shape)


def pack_ternary(w) -> PackedTensor:
    tq = ternary_quantize(w)
    return pack(tq.codes, 2, tq.scale)


def pack_kbit(w, bits: int) -> PackedTensor:
    s = 2 ** (bits - 1) - 1
    return pack(weight_grid_indices(w, bits), bits, 1.0 / s)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _row_major(packed: PackedTensor, rows: int) -> np.ndarray:
    return packed.values.reshape(rows, -1)


def ternary_matmul(x: np.ndarray, codes: np.ndarray, scale: float) -> np.ndarray:
    """``y[:, i] = scale * (sum of x over +1 codes - sum of x over -1 codes)``.

    ``codes`` is ``[m, k]``; ``x`` is ``[n, k]``.  The only multiplication is
    the final per-layer scale.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != codes.shape[1]:
        raise ValueError(f"ternary kernel shape mismatch: input {x.shape} vs weights {codes.shape}")
    out = np.empty(x.shape[:-1] + (codes.shape[0],), dtype=np.float64)
    for i, row in enumerate(codes):
        pos = np.flatnonzero(row == 1)
        neg = np.flatnonzero(row == -1)
        out[..., i] = x[..., pos].sum(axis=-1) - x[..., neg].sum(axis=-1)
    return out * scale


def ternary_matvec(packed: PackedTensor, x) -> np.ndarray:
    """Matrix-vector product with packed ternary ``W[m, k]``."""
    if packed.bits != 2 or len(packed.shape) != 2:
        raise ValueError("ternary_matvec needs a 2-d ternary PackedTensor")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (packed.shape[1],):
        raise ValueError(f"ternary_matvec shape mismatch: W {packed.shape}, x {x.shape}")
    return ternary_matmul(x, packed.values, packed.scale)


def kbit_matmul(x: np.ndarray, idx: np.ndarray, step: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != idx.shape[1]:
        raise ValueError(f"k-bit kernel shape mismatch: input {x.shape} vs weights {idx.shape}")
    return (x @ idx.T.astype(np.float64)) * step


def _packed_rows_matmul(x: np.ndarray, packed: PackedTensor, rows: np.ndarray) -> np.ndarray:
    if packed.bits == 2:
        return ternary_matmul(x, rows, packed.scale)
    return kbit_matmul(x, rows, packed.scale)


def packed_linear(x: np.ndarray, packed: PackedTensor) -> np.ndarray:
    # Linear weights are stored [in, out]; kernels want output rows
    rows = packed.values.reshape(packed.shape).T
    return _packed_rows_matmul(x, packed, rows)


def packed_conv2d(x: np.ndarray, packed: PackedTensor, stride: int, pad: int, floor: bool = False) -> np.ndarray:
    f, c, kh, kw = packed.shape
    cols, ho, wo = im2col(np.asarray(x, dtype=np.float64), kh, kw, stride, pad, floor)
    y = _packed_rows_matmul(cols, packed, _row_major(packed, f))
    return np.ascontiguousarray(y.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

@dataclass
class QuantizedExport:
    """Packed weights for quantized layers plus raw arrays for everything else."""

    records: dict[str, PackedTensor | np.ndarray] = field(default_factory=dict)

    @property
    def packed_names(self) -> list[str]:
        return [n for n, r in self.records.items() if isinstance(r, PackedTensor)]


def export_quantized(model: Network, spec: QuantSpec | None = None) -> QuantizedExport:
    """Pack every weight that carries a quantization node; keep the rest raw."""
    if spec is not None:
        apply_policy(model, spec)
    quantized = {}
    for layer in model.weight_layers():
        node = layer.weight_quant
        if node is None:
            continue
        if node.bits not in PACKABLE_BITS:
            raise ValueError(f"layer precision of {node.bits} bits is not supported by the packer")
        w = layer.weight.data
        quantized[id(layer.weight)] = pack_ternary(w) if node.kind == "ternary" else pack_kbit(w, node.bits)
    params = dict(model.named_parameters())
    out = QuantizedExport()
    for name, arr in state_items(model):
        p = params.get(name)
        packed = quantized.get(id(p)) if p is not None else None
        out.records[name] = packed if packed is not None else np.array(arr, dtype=np.float32)
    return out


def export_bytes(export: QuantizedExport) -> bytes:
    out = [EXPORT_MAGIC, struct.pack("<II", EXPORT_VERSION, len(export.records))]
    for name, rec in export.records.items():
        raw = name.encode("utf-8")
        if isinstance(rec, PackedTensor):
            shape, bits, scale, payload = rec.shape, rec.bits, rec.scale, rec.payload
        else:
            shape, bits, scale = rec.shape, 32, 1.0
            payload = np.ascontiguousarray(rec, dtype="<f4").tobytes()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape))
                   + struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<Bd", bits, scale)
                   + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


def write_export(path, export: QuantizedExport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(export_bytes(export))
    return path


def parse_export(buf: bytes, what: str = "export") -> QuantizedExport:
    r = _Reader(buf, what)
    magic = r.take(4)
    if magic != EXPORT_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}, expected {EXPORT_MAGIC!r}")
    version = r.u32()
    if version != EXPORT_VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    out = QuantizedExport()
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        shape = r.unpack(f"{rank}I") if rank else ()
        bits, scale = r.unpack("Bd")
        payload = r.take(r.u64())
        if bits == 32:
            if len(payload) != 4 * math.prod(shape):
                raise FormatError(f"{what}: record {name!r} payload does not match shape {shape}")
            out.records[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        elif bits in PACKABLE_BITS:
            out.records[name] = PackedTensor(bits, payload, shape, scale)
        else:
            raise FormatError(f"{what}: record {name!r} has unsupported precision {bits} bits")
    r.done()
    return out


def read_export(path) -> QuantizedExport:
    return parse_export(Path(path).read_bytes(), str(path))


def load_packed_model(export: QuantizedExport, spec: ModelSpec, quant: QuantSpec) -> Network:
    """Build a float64 inference model whose quantized layers run packed kernels."""
    model = build_model(spec)
    params = dict(model.named_parameters())
    names = {n for n, _ in state_items(model)}
    if set(export.records) != names:
        missing = sorted(names ^ set(export.records))
        raise FormatError(f"export does not match model {spec}: first mismatched record {missing[0]!r}")
    for name, rec in export.records.items():
        if isinstance(rec, PackedTensor):
            continue
        if name in params:
            params[name].data = rec.copy()
        else:
            _set_buffer(model, name, rec)
    model.astype(np.float64)
    apply_policy(model, quant)
    by_param = {id(p): n for n, p in params.items()}
    for layer in model.weight_layers():
        rec = export.records[by_param[id(layer.weight)]]
        if isinstance(rec, PackedTensor):
            if rec.shape != layer.weight.shape:
                raise FormatError(f"packed shape {rec.shape} does not match layer weight {layer.weight.shape}")
            layer.packed = rec
    return model.eval()


def reference_model(model: Network) -> Network:
    """Float64 copy of ``model`` running the fake-quantized training graph."""
    ref = copy.deepcopy(model)
    for layer in ref.weight_layers():
        layer.packed = None
    return ref.astype(np.float64).eval()


def predict_logits(model: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    dtype = model.weight_layers()[0].weight.data.dtype
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model(Tensor(np.asarray(x[i:i + batch_size], dtype=dtype))).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# memory footprint
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerRow:
    name: str
    ifm: int
    ofm: int
    weights: int


@dataclass
class FootprintReport:
    """Per-layer byte counts for each batch size plus the peak-memory totals."""

    batch_sizes: tuple[int, ...]
    rows: dict[int, list[dict]]
    totals: dict[int, dict]

    def recompute_totals(self) -> dict[int, dict]:
        return {b: _totals(self.rows[b]) for b in self.batch_sizes}

    def render(self) -> str:
        lines = []
        for b in self.batch_sizes:
            lines.append(f"batch size {b}")
            lines.append(f"  {'layer':<32}{'IFM bytes':>16}{'OFM bytes':>16}{'weight bytes':>16}")
            for r in self.rows[b]:
                lines.append(f"  {r['name']:<32}{r['ifm_bytes']:>16.0f}{r['ofm_bytes']:>16.0f}{r['weight_bytes']:>16.0f}")
            t = self.totals[b]
            lines.append(f"  max IFM {t['max_ifm']:.0f} + max OFM {t['max_ofm']:.0f} + weights {t['weights']:.0f}"
                         f" = {t['total']:.0f} bytes (activations {t['activations']:.0f})")
        return "\n".join(lines)


def _totals(rows: list[dict]) -> dict:
    max_ifm = max(r["ifm_bytes"] for r in rows)
    max_ofm = max(r["ofm_bytes"] for r in rows)
    weights = math.fsum(r["weight_bytes"] for r in rows)
    return {"max_ifm": max_ifm, "max_ofm": max_ofm, "weights": weights,
            "activations": max_ifm + max_ofm, "total": max_ifm + max_ofm + weights}


def footprint(table: list[LayerRow], weight_bits, batch_sizes=(1, 8), act_bits: int = 32) -> FootprintReport:
    """Inference memory: ``max(IFM) + max(OFM) + sum(weights)`` per batch size.

    ``weight_bits`` is one width for every layer or a per-layer sequence.
    """
    if isinstance(weight_bits, int):
        weight_bits = [weight_bits] * len(table)
    if len(weight_bits) != len(table):
        raise ValueError("need one weight precision per layer")
    rows, totals = {}, {}
    for b in batch_sizes:
        rows[b] = [
            {"name": r.name, "ifm_bytes": r.ifm * b * act_bits / 8, "ofm_bytes": r.ofm * b * act_bits / 8,
             "weight_bytes": r.weights * wb / 8, "weight_bits": wb}
            for r, wb in zip(table, weight_bits)
        ]
        totals[b] = _totals(rows[b])
    return FootprintReport(tuple(batch_sizes), rows, totals)


def policy_weight_bits(n_layers: int, spec: QuantSpec) -> list[int]:
    bits = [spec.weight_bits] * n_layers
    if spec.exempt_first_last and n_layers > 2:
        bits[0] = bits[-1] = 32
    return bits


def trace_layer_table(model: Network, batch: int = 1) -> list[LayerRow]:
    """Record per-sample IFM/OFM/weight element counts of each conv/linear layer."""
    rows: list[LayerRow] = []
    names = {id(p): n for n, p in model.named_parameters()}
    layers = model.weight_layers()
    for layer in layers:
        def hook(x, _layer=layer, _orig=type(layer).forward):
            y = _orig(_layer, x)
            n_w = sum(p.size for p in (_layer.weight, getattr(_layer, "bias", None)) if p is not None)
            rows.append(LayerRow(names[id(_layer.weight)].rsplit(".", 1)[0], x.size // x.shape[0],
                                 y.size // y.shape[0], n_w))
            return y
        layer.forward = hook
    try:
        predict_logits(model, np.zeros((batch,) + model.spec.input_shape, dtype=np.float32))
    finally:
        for layer in layers:
            del layer.forward
    return rows


def named_layer_tables() -> dict[str, list[LayerRow]]:
    """Layer tables of AlexNet, Inception-ResNet-v2, ResNet-50 and ResNet-101 at 224x224."""
    text = resources.files("apprentice").joinpath("layer_tables.json").read_text()
    data = json.loads(text)
    return {k: [LayerRow(**r) for r in v] for k, v in data.items()}


# ---------------------------------------------------------------------------
# sparsity equivalence
# ---------------------------------------------------------------------------

DEFAULT_INDEX_BITS = 16


def sparse_equivalence(weight_bits: int, index_bits_per_nonzero: int = DEFAULT_INDEX_BITS) -> tuple[float, float]:
    """Sparsity a 32-bit model needs to match a ``weight_bits`` model in size.

    Returns (raw sparsity, sparsity once each surviving value also stores an
    index of ``index_bits_per_nonzero`` bits).
    """
    if not 0 < weight_bits < 32:
        raise ValueError(f"weight_bits must be below 32, got {weight_bits}")
    raw = 1 - weight_bits / 32
    adjusted = 1 - weight_bits / (32 + index_bits_per_nonzero)
    return raw, adjusted
