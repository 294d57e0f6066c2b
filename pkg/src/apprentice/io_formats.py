"""Binary checkpoint and logit-cache files, and line-delimited epoch metrics.

All multi-byte numbers are little-endian and every variable-length field is
preceded by its length, so a truncated file always fails to parse.

Checkpoint (``APPR``)::

    magic "APPR" | u32 version | u32 len + model-spec JSON | u32 len + metadata JSON
    | u32 count + parameter records | u32 count + optimizer records

    record: u16 name len + UTF-8 name | u8 rank | rank x u32 extents
            | u64 payload bytes + float32 payload

Logit cache (``APLC``)::

    magic "APLC" | u32 version | u32 classes | u64 count | count x (u64 id, classes x float32)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .models import ModelSpec, Network, build_model
from .quant import QuantSpec, apply_policy

CHECKPOINT_MAGIC = b"APPR"
CACHE_MAGIC = b"APLC"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at offset {self.pos} (needed {n} more bytes, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u16(self) -> int:
        return self.unpack("H")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def u64(self) -> int:
        return self.unpack("Q")[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes at offset {self.pos}")


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", len(payload)) + payload)


def _read_record(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u16()).decode("utf-8")
    rank = r.u8()
    shape = r.unpack(f"{rank}I") if rank else ()
    nbytes = r.u64()
    if nbytes != 4 * math.prod(shape):
        raise FormatError(f"{r.what}: record {name!r} payload {nbytes} bytes does not match shape {shape}")
    arr = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
    return name, arr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def state_items(model) -> list[tuple[str, np.ndarray]]:
    """Parameters then running statistics, in construction order."""
    items = [(n, p.data) for n, p in model.named_parameters()]
    items += list(model.named_buffers())
    return items


@dataclass
class Checkpoint:
    spec: ModelSpec
    metadata: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


def checkpoint_bytes(model: Network, metadata: dict | None = None,
                     optimizer_state: dict[str, np.ndarray] | None = None) -> bytes:
    meta = dict(metadata or {})
    meta.setdefault("quant", str(model.quant_spec))
    meta.setdefault("exempt_first_last", model.quant_spec.exempt_first_last)
    items = state_items(model)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for text in (model.spec.to_json(), json.dumps(meta, sort_keys=True)):
        raw = text.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
    out.append(struct.pack("<I", len(items)))
    out += [_pack_record(n, a) for n, a in items]
    opt = optimizer_state or {}
    out.append(struct.pack("<I", len(opt)))
    out += [_pack_record(n, a) for n, a in opt.items()]
    return b"".join(out)


def save_checkpoint(model: Network, path, metadata: dict | None = None,
                    optimizer_state: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, metadata, optimizer_state))
    return path


def parse_checkpoint(buf: bytes, what: str = "checkpoint") -> Checkpoint:
    r = _Reader(buf, what)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported version {version} (this build reads {FORMAT_VERSION})")
    spec = ModelSpec.from_json(r.text())
    meta = json.loads(r.text())
    params = dict(_read_record(r) for _ in range(r.u32()))
    opt = dict(_read_record(r) for _ in range(r.u32()))
    r.done()
    return Checkpoint(spec, meta, params, opt)


def read_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def load_state(model: Network, ckpt: Checkpoint) -> Network:
    """Copy checkpoint arrays into ``model``; names and shapes must match exactly."""
    expected = state_items(model)
    for name, current in expected:
        if name not in ckpt.params:
            raise FormatError(f"checkpoint has no record for parameter {name!r}")
        if ckpt.params[name].shape != current.shape:
            raise FormatError(f"parameter {name!r}: checkpoint shape {ckpt.params[name].shape} != model shape {current.shape}")
    unknown = sorted(set(ckpt.params) - {n for n, _ in expected})
    if unknown:
        raise FormatError(f"checkpoint record {unknown[0]!r} is unknown to the model")
    params = dict(model.named_parameters())
    for name, _ in expected:
        arr = ckpt.params[name].copy()
        if name in params:
            params[name].data = arr
            params[name].grad = None
        else:
            _set_buffer(model, name, arr)
    return model


def _set_buffer(model, dotted: str, arr: np.ndarray) -> None:
    *path, attr = dotted.split(".")
    mod = model
    for part in path:
        mod = dict(mod.children())[part]
    getattr(mod, attr)[...] = arr


def load_checkpoint(path, model: Network | None = None) -> tuple[Network, dict]:
    """Load into ``model`` (which must match) or into a freshly built one.

    The stored precision policy is re-applied so the model computes the same
    forward pass it was saved with.
    """
    ckpt = read_checkpoint(path)
    if model is None:
        model = build_model(ckpt.spec)
    elif model.spec != ckpt.spec:
        raise FormatError(f"checkpoint was saved from {ckpt.spec}, cannot load into {model.spec}")
    load_state(model, ckpt)
    quant = ckpt.metadata.get("quant")
    if quant:
        apply_policy(model, QuantSpec.parse(quant, ckpt.metadata.get("exempt_first_last", True)))
    return model, ckpt.metadata


# ---------------------------------------------------------------------------
# logit caches
# ---------------------------------------------------------------------------

@dataclass
class LogitCache:
    ids: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.logits = np.asarray(self.logits, dtype=np.float32)
        if self.logits.ndim != 2 or len(self.logits) != len(self.ids):
            raise ValueError("logit cache needs one row of class logits per id")
        if len(self.ids) > 1 and np.any(np.diff(self.ids) <= 0):
            raise ValueError("logit cache ids must be strictly increasing")
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def lookup(self, ids) -> np.ndarray:
        try:
            rows = [self._index[int(i)] for i in ids]
        except KeyError as exc:
            raise KeyError(f"sample id {exc.args[0]} missing from logit cache") from None
        return self.logits[rows]


def write_logit_cache(path, cache: LogitCache) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.empty(len(cache.ids), dtype=[("id", "<u8"), ("z", "<f4", (cache.num_classes,))])
    rows["id"] = cache.ids
    rows["z"] = cache.logits
    header = CACHE_MAGIC + struct.pack("<IIQ", FORMAT_VERSION, cache.num_classes, len(cache.ids))
    path.write_bytes(header + rows.tobytes())
    return path


def read_logit_cache(path) -> LogitCache:
    what = str(path)
    r = _Reader(Path(path).read_bytes(), what)
    magic = r.take(4)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    classes, count = r.u32(), r.u64()
    dtype = np.dtype([("id", "<u8"), ("z", "<f4", (classes,))])
    rows = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype)
    r.done()
    return LogitCache(rows["id"].astype(np.int64), rows["z"].astype(np.float32))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    split: str
    top1_error: float
    loss_total: float | None = None
    loss_teacher_ce: float | None = None
    loss_student_ce: float | None = None
    loss_distill: float | None = None
    seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.top1_error <= 100.0:
            raise ValueError(f"top1_error must be a percentage, got {self.top1_error}")


METRIC_FIELDS = tuple(f.name for f in fields(EpochRecord))


def _percent_text(v: float) -> str:
    # shortest round-trip repr, zero-padded to >= 4 significant digits (exact)
    mantissa, e, exponent = repr(float(v)).partition("e")
    if "." not in mantissa:
        mantissa += "."
    digits = mantissa.replace("-", "").replace(".", "").lstrip("0")
    if not digits:
        return "0.000"
    return mantissa + "0" * max(0, 4 - len(digits)) + e + exponent


def format_metric(record: EpochRecord) -> str:
    parts = []
    for name, value in asdict(record).items():
        text = _percent_text(value) if name == "top1_error" else json.dumps(value)
        parts.append(f"{json.dumps(name)}: {text}")
    return "{" + ", ".join(parts) + "}"


def emit_metrics(records: Iterable[EpochRecord], out: IO[str]) -> None:
    for rec in records:
        out.write(format_metric(rec) + "\n")


def parse_metrics(text: str) -> list[EpochRecord]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        d = json.loads(line)
        missing = set(METRIC_FIELDS) - set(d)
        if missing:
            raise FormatError(f"metrics line {lineno}: missing fields {sorted(missing)}")
        out.append(EpochRecord(**{k: d[k] for k in METRIC_FIELDS}))
    return out
