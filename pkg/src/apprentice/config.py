"""Run configuration: ``key = value`` text files with ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

from .distill import DistillConfig
from .models import FAMILIES, ModelSpec
from .quant import FULL_PRECISION, QuantSpec

SCHEMES = ("A", "B", "C", "BASELINE")
DEFAULT_FINE_TUNE_SCHEDULE = ((1e-3, 12), (1e-4, 8), (1e-5, 5))
DEFAULT_LR = 0.05
DEFAULT_EPOCHS = 10


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based (overrides continue the count)."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "mnist5k"
    dir: str = "data"
    subset_per_class: int | None = None
    augment: bool | str = False


@dataclass(frozen=True)
class RunConfig:
    scheme: str
    student_spec: ModelSpec
    teacher_spec: ModelSpec
    student_quant: QuantSpec = FULL_PRECISION
    teacher_quant: QuantSpec = FULL_PRECISION
    distill: DistillConfig = field(default_factory=DistillConfig)
    lr_schedule: tuple[tuple[float, int], ...] = ((DEFAULT_LR, DEFAULT_EPOCHS),)
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warm_start_epochs: int | None = None
    teacher_checkpoint: str | None = None
    logit_cache_path: str | None = None
    prime_checkpoint: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    run_dir: str = "runs/default"

    @property
    def epochs(self) -> int:
        return sum(n for _, n in self.lr_schedule)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        seen = 0
        for lr, n in self.lr_schedule:
            seen += n
            if epoch <= seen:
                return lr
        return self.lr_schedule[-1][0]

    def validate(self, check_files: bool = False) -> RunConfig:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheme == "B" and not (self.teacher_checkpoint or self.logit_cache_path):
            raise ConfigError("scheme B needs teacher.checkpoint or teacher.logit_cache")
        if self.scheme == "C":
            if not self.prime_checkpoint:
                raise ConfigError("scheme C needs student.prime_checkpoint (a full-precision student)")
            if not (self.teacher_checkpoint or self.logit_cache_path):
                raise ConfigError("scheme C needs teacher.checkpoint or teacher.logit_cache")
        if self.warm_start_epochs is not None and self.scheme != "B":
            raise ConfigError("warm_start_epochs is only valid for scheme B")
        if self.warm_start_epochs is not None and not 0 <= self.warm_start_epochs <= self.epochs:
            raise ConfigError("warm_start_epochs must lie within the run length")
        if not self.teacher_quant.is_full_precision:
            raise ConfigError("the teacher is full precision by construction; teacher.quant must be 32A,32W")
        q = self.student_quant
        if q.exempt_first_last and not q.is_full_precision and self.student_spec.weight_layer_count <= 2:
            raise ConfigError(f"student has {self.student_spec.weight_layer_count} weight layers; exempting the "
                              "first and last leaves nothing to quantize (set student.exempt_first_last = false)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if check_files:
            for label, path in (("teacher.checkpoint", self.teacher_checkpoint),
                                ("teacher.logit_cache", self.logit_cache_path),
                                ("student.prime_checkpoint", self.prime_checkpoint)):
                if path and not Path(path).exists():
                    raise ConfigError(f"{label} file {path} does not exist")
        return self

    def with_overrides(self, **kwargs) -> RunConfig:
        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# value parsers
# ---------------------------------------------------------------------------

def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip().strip("[]")
    return tuple(int(t) for t in text.replace(",", " ").split()) if text else ()


def _schedule(text: str) -> tuple[tuple[float, int], ...]:
    stages = []
    for chunk in text.split(","):
        lr, _, n = chunk.partition(":")
        if not n:
            raise ValueError(f"schedule stage {chunk.strip()!r} must be 'lr:epochs'")
        lr_v, n_v = float(lr), int(n)
        if lr_v <= 0 or n_v < 0:
            raise ValueError(f"bad schedule stage {chunk.strip()!r}")
        stages.append((lr_v, n_v))
    return tuple(stages)


def _augment(text: str):
    low = text.lower()
    if low in ("crop_flip", "shift"):
        return low
    return _bool(text)


def _opt_int(text: str):
    return None if text.lower() in ("", "none") else int(text)


_KEYS: dict[str, Callable[[str], object]] = {
    "scheme": lambda s: s.upper(),
    "seed": int,
    "batch_size": int,
    "epochs": int,
    "lr": float,
    "lr_schedule": _schedule,
    "momentum": float,
    "weight_decay": float,
    "warm_start_epochs": int,
    "model.family": str,
    "model.n": int,
    "model.widths": _int_list,
    "model.num_classes": int,
    "teacher.family": str,
    "teacher.n": int,
    "teacher.widths": _int_list,
    "teacher.quant": QuantSpec.parse,
    "teacher.checkpoint": str,
    "teacher.logit_cache": str,
    "student.quant": QuantSpec.parse,
    "student.exempt_first_last": _bool,
    "student.prime_checkpoint": str,
    "distill.alpha": float,
    "distill.beta": float,
    "distill.gamma": float,
    "distill.tau": float,
    "data.dir": str,
    "data.dataset": str,
    "data.subset_per_class": _opt_int,
    "data.augment": _augment,
    "run.dir": str,
}

KNOWN_KEYS = tuple(_KEYS)


def _lines(text: str, overrides: Iterable[str]):
    lines = text.splitlines()
    for i, line in enumerate(lines, 1):
        yield i, line
    for j, line in enumerate(overrides, len(lines) + 1):
        yield j, line


def parse_config(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    """Parse a config file body, then ``overrides`` (``key=value``), last wins.

    Unknown keys and unparsable values are errors carrying the line number.
    """
    values: dict[str, object] = {}
    where: dict[str, int] = {}
    for lineno, raw in _lines(text, overrides):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        try:
            values[key] = _KEYS[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
        where[key] = lineno
    return _build(values, where)


def _build(v: dict, where: dict) -> RunConfig:
    def fail(key: str, msg: str):
        raise ConfigError(msg, where.get(key))

    if "scheme" not in v:
        raise ConfigError("missing required key 'scheme'")
    if v["scheme"] not in SCHEMES:
        fail("scheme", f"scheme must be one of {SCHEMES}, got {v['scheme']!r}")
    if "model.family" not in v:
        raise ConfigError("missing required key 'model.family'")
    if v["model.family"] not in FAMILIES:
        fail("model.family", f"unknown model family {v['model.family']!r}")
    num_classes = v.get("model.num_classes", 10)
    try:
        student = ModelSpec(v["model.family"], v.get("model.n", 3), v.get("model.widths", ()), num_classes)
    except ValueError as exc:
        fail("model.family", str(exc))
    t_family = v.get("teacher.family", student.family)
    try:
        teacher = ModelSpec(t_family, v.get("teacher.n", student.n if t_family == student.family else 3),
                            v.get("teacher.widths", student.widths if t_family == student.family else ()),
                            num_classes)
    except ValueError as exc:
        fail("teacher.family", str(exc))

    if "lr_schedule" in v:
        schedule = v["lr_schedule"]
        if "epochs" in v and v["epochs"] != sum(n for _, n in schedule):
            fail("epochs", "epochs disagrees with the total length of lr_schedule")
        if "lr" in v:
            fail("lr", "give either lr or lr_schedule, not both")
    elif v["scheme"] == "C" and "lr" not in v and "epochs" not in v:
        schedule = DEFAULT_FINE_TUNE_SCHEDULE
    else:
        schedule = ((v.get("lr", DEFAULT_LR), v.get("epochs", DEFAULT_EPOCHS)),)

    quant = v.get("student.quant", FULL_PRECISION)
    exempt = v.get("student.exempt_first_last", True)
    quant = QuantSpec(quant.weight_bits, quant.act_bits, exempt)
    try:
        distill = DistillConfig(v.get("distill.alpha", 1.0), v.get("distill.beta", 0.5),
                                v.get("distill.gamma", 0.5), v.get("distill.tau", 1.0))
    except ValueError as exc:
        fail("distill.alpha", str(exc))
    data = DataConfig(v.get("data.dataset", "mnist5k"), v.get("data.dir", "data"),
                      v.get("data.subset_per_class"), v.get("data.augment", False))
    cfg = RunConfig(
        scheme=v["scheme"], student_spec=student, teacher_spec=teacher, student_quant=quant,
        teacher_quant=v.get("teacher.quant", FULL_PRECISION), distill=distill, lr_schedule=schedule,
        batch_size=v.get("batch_size", 64), seed=v.get("seed", 0), momentum=v.get("momentum", 0.9),
        weight_decay=v.get("weight_decay", 1e-4), warm_start_epochs=v.get("warm_start_epochs"),
        teacher_checkpoint=v.get("teacher.checkpoint"), logit_cache_path=v.get("teacher.logit_cache"),
        prime_checkpoint=v.get("student.prime_checkpoint"), data=data,
        run_dir=v.get("run.dir", "runs/default"),
    )
    try:
        return cfg.validate()
    except ConfigError as exc:
        # cross-key constraints are reported at the scheme line
        raise ConfigError(str(exc), where.get("scheme")) from None
