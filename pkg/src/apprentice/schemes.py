"""Training drivers: joint (A), frozen-teacher (B) and fine-tune (C) distillation.

``run_baseline`` trains a single network on hard labels only; it produces
teachers, full-precision primes for scheme C and no-teacher comparisons.
"""

from __future__ import annotations

import copy
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, RunConfig
from .data import ChannelNormalizer, Dataset, augment_mode, batch_iterator, load_dataset
from .distill import DistillConfig, Prediction, loss_terms
from .io_formats import EpochRecord, LogitCache, load_checkpoint, read_logit_cache, write_logit_cache
from .models import Network, build_model, capacity
from .quant import FULL_PRECISION, apply_policy
from .tensor import SGD, Tensor, no_grad, one_hot, softmax

log = logging.getLogger(__name__)

HARD_LABELS_ONLY = DistillConfig(alpha=0.0, beta=1.0, gamma=0.0)
EVAL_BATCH = 500


class TeacherCapacityWarning(UserWarning):
    """The teacher is shallower or smaller than the student."""


@dataclass
class SchemeResult:
    student: Network
    records: list[EpochRecord]
    teacher: Network | None = None
    normalizer: ChannelNormalizer | None = None
    info: dict = field(default_factory=dict)

    def test_errors(self, split: str = "test") -> list[float]:
        return [r.top1_error for r in self.records if r.split == split]


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def evaluate(model: Network, ds: Dataset, normalizer: ChannelNormalizer | None = None,
             batch_size: int = EVAL_BATCH, dtype=None) -> float:
    """Top-1 error (%) of ``model`` on ``ds`` in eval mode."""
    model.eval()
    wrong = 0
    with no_grad():
        for b in batch_iterator(ds, batch_size, shuffle=False, normalizer=normalizer):
            x = b.x if dtype is None else b.x.astype(dtype)
            wrong += int((model(Tensor(x)).data.argmax(axis=1) != b.y).sum())
    return 100.0 * wrong / len(ds)


def teacher_logits(teacher: Network, x: np.ndarray) -> np.ndarray:
    """Frozen-teacher logits.

    Evaluated in float64 and rounded to float32, so the value of a sample
    does not depend on which other samples share its batch.
    """
    teacher.eval()
    with no_grad():
        z = teacher(Tensor(np.asarray(x, dtype=np.float64))).data
    return z.astype(np.float32)


def _as_float64_copy(model: Network) -> Network:
    return copy.deepcopy(model).astype(np.float64)


def cache_teacher_logits(teacher: Network, ds: Dataset, normalizer: ChannelNormalizer | None = None,
                         path=None, augment=False, batch_size: int = EVAL_BATCH) -> LogitCache:
    """Pre-compute teacher logits for every sample, keyed by sample id."""
    if augment:
        raise ValueError("cannot cache logits with augmentation on: logits would depend on the augmented view")
    if len(np.unique(ds.ids)) != len(ds.ids):
        raise ValueError("sample id collision; logit caches key on unique ids")
    t64 = _as_float64_copy(teacher)
    ids, rows = [], []
    for b in batch_iterator(ds, batch_size, shuffle=False, normalizer=normalizer):
        ids.append(b.ids)
        rows.append(teacher_logits(t64, b.x))
    ids_arr = np.concatenate(ids)
    order = np.argsort(ids_arr, kind="stable")
    cache = LogitCache(ids_arr[order], np.concatenate(rows)[order])
    if path is not None:
        write_logit_cache(path, cache)
    return cache


def _check_capacity(teacher: Network, student: Network) -> None:
    t_depth, t_params = capacity(teacher)
    s_depth, s_params = capacity(student)
    if t_depth < s_depth or t_params < s_params:
        warnings.warn(
            f"teacher ({t_depth} layers, {t_params} params) is smaller than the student "
            f"({s_depth} layers, {s_params} params); distillation helps only when the teacher "
            "is the more accurate network",
            TeacherCapacityWarning, stacklevel=3,
        )


def _prepare_data(cfg: RunConfig, data):
    if data is None:
        data = load_dataset(cfg.data.dataset, cfg.data.dir, cfg.data.subset_per_class, cfg.seed)
    train, test = data[0], data[1]
    normalizer = data[2] if len(data) > 2 else ChannelNormalizer().fit(train)
    return train, test, normalizer


def _load_teacher(cfg: RunConfig, teacher):
    if teacher is not None:
        return teacher
    if cfg.teacher_checkpoint:
        model, _ = load_checkpoint(cfg.teacher_checkpoint)
        return model
    return None


class _EpochStats:
    def __init__(self):
        self.n = self.wrong = 0
        self.sums = {"total": 0.0, "teacher": 0.0, "student": 0.0, "distill": 0.0}
        self.has_teacher = self.has_distill = False

    def add(self, terms, logits: np.ndarray, y: np.ndarray) -> None:
        k = len(y)
        self.n += k
        self.wrong += int((logits.argmax(axis=1) != y).sum())
        self.sums["total"] += terms.total.item() * k
        self.sums["student"] += terms.student_ce * k
        self.sums["distill"] += terms.distill * k
        if terms.teacher_ce is not None:
            self.has_teacher = True
            self.sums["teacher"] += terms.teacher_ce * k

    def record(self, epoch: int, seconds: float, distill: bool) -> EpochRecord:
        m = lambda key: self.sums[key] / self.n
        return EpochRecord(epoch, "train", 100.0 * self.wrong / self.n, m("total"),
                           m("teacher") if self.has_teacher else None, m("student"),
                           m("distill") if distill else None, seconds)


def _train(cfg: RunConfig, student: Network, train: Dataset, test: Dataset, normalizer,
           teacher: Network | None = None, joint: bool = False, cache: LogitCache | None = None,
           loss_cfg: DistillConfig | None = None, on_epoch=None, first_epoch: int = 1) -> list[EpochRecord]:
    """Shared SGD loop over ``cfg.lr_schedule``.

    ``joint`` trains teacher and student together (scheme A).  Otherwise the
    teacher (or ``cache``) is a frozen source of logits, or absent entirely
    for hard-label training.  ``on_epoch(epoch)`` runs before each epoch.
    """
    loss_cfg = loss_cfg or cfg.distill
    distilling = teacher is not None or cache is not None
    params = student.parameters() + (teacher.parameters() if joint else [])
    opt = SGD(params, cfg.lr_schedule[0][0], cfg.momentum, cfg.weight_decay)
    frozen = None
    if distilling and not joint and teacher is not None:
        frozen = _as_float64_copy(teacher)
    augment = cfg.data.augment if cache is None else False
    if cache is not None and augment_mode(train, cfg.data.augment):
        log.info("logit cache in use: augmentation disabled")
    records = []
    num_classes = student.spec.num_classes
    for epoch in range(first_epoch, cfg.epochs + 1):
        if on_epoch is not None:
            on_epoch(epoch)
        opt.lr = cfg.lr_at(epoch)
        start = time.perf_counter()
        stats = _EpochStats()
        student.train()
        if joint:
            teacher.train()
        for b in batch_iterator(train, cfg.batch_size, seed=cfg.seed, shuffle=True, augment=augment,
                                normalizer=normalizer, epoch=epoch):
            y1h = one_hot(b.y, num_classes)
            x = Tensor(b.x)
            z_s = student(x)
            p_s = Prediction.from_logits(z_s)
            if joint:
                p_t = Prediction.from_logits(teacher(x))
            elif cache is not None:
                z = cache.lookup(b.ids)
                p_t = Prediction(Tensor(z), Tensor(softmax(Tensor(z)).data))
            elif frozen is not None:
                z = teacher_logits(frozen, b.x)
                p_t = Prediction(Tensor(z), Tensor(softmax(Tensor(z)).data))
            else:
                p_t = None
            terms = loss_terms(y1h, p_t, p_s, loss_cfg, teacher_trainable=joint)
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            stats.add(terms, z_s.data, b.y)
        seconds = time.perf_counter() - start
        records.append(stats.record(epoch, seconds, distilling))
        records.append(EpochRecord(epoch, "test", evaluate(student, test, normalizer)))
        if joint:
            records.append(EpochRecord(epoch, "teacher-test", evaluate(teacher, test, normalizer)))
        log.info("epoch %d: train err %.2f%% test err %.2f%% (%.1fs)", epoch,
                 records[-2 - joint].top1_error, records[-1 - joint].top1_error, seconds)
    return records


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def run_baseline(cfg: RunConfig, data=None) -> SchemeResult:
    """Hard-label training of ``cfg.student_spec`` at ``cfg.student_quant``."""
    train, test, normalizer = _prepare_data(cfg, data)
    student = apply_policy(build_model(cfg.student_spec, seed=cfg.seed), cfg.student_quant)
    records = _train(cfg, student, train, test, normalizer, loss_cfg=HARD_LABELS_ONLY)
    return SchemeResult(student, records, normalizer=normalizer)


def run_scheme_a(cfg: RunConfig, data=None) -> SchemeResult:
    """Jointly train a full-precision teacher and a low-precision student."""
    if not cfg.teacher_quant.is_full_precision:
        raise ConfigError("scheme A keeps the teacher at full precision; quantized teacher rejected")
    if cfg.distill.alpha <= 0:
        raise ConfigError("scheme A trains the teacher through the alpha term; alpha must be positive")
    train, test, normalizer = _prepare_data(cfg, data)
    student = apply_policy(build_model(cfg.student_spec, seed=cfg.seed), cfg.student_quant)
    teacher = build_model(cfg.teacher_spec, seed=cfg.seed + 10_000)
    _check_capacity(teacher, student)
    records = _train(cfg, student, train, test, normalizer, teacher=teacher, joint=True)
    return SchemeResult(student, records, teacher=teacher, normalizer=normalizer)


def run_scheme_b(cfg: RunConfig, data=None, teacher: Network | None = None,
                 cache: LogitCache | None = None) -> SchemeResult:
    """Train a low-precision student from scratch against a frozen teacher.

    The teacher is never updated.  With ``warm_start_epochs`` the student
    first trains at full precision and is lowered afterwards.
    """
    train, test, normalizer = _prepare_data(cfg, data)
    teacher = _load_teacher(cfg, teacher)
    if cache is None and cfg.logit_cache_path and teacher is None:
        cache = read_logit_cache(cfg.logit_cache_path)
    if teacher is None and cache is None:
        raise ConfigError("scheme B needs a trained teacher checkpoint or a logit cache")
    student = build_model(cfg.student_spec, seed=cfg.seed)
    if teacher is not None:
        _check_capacity(teacher, student)
    warm = cfg.warm_start_epochs or 0

    def on_epoch(epoch):
        if epoch == 1:
            apply_policy(student, FULL_PRECISION if warm else cfg.student_quant)
        if warm and epoch == warm + 1:
            apply_policy(student, cfg.student_quant)

    records = _train(cfg, student, train, test, normalizer, teacher=None if cache is not None else teacher,
                     cache=cache, on_epoch=on_epoch)
    if warm >= cfg.epochs:
        apply_policy(student, cfg.student_quant)
    return SchemeResult(student, records, teacher=teacher, normalizer=normalizer)


def run_scheme_c(cfg: RunConfig, data=None, teacher: Network | None = None, prime: Network | None = None,
                 cache: LogitCache | None = None) -> SchemeResult:
    """Lower a full-precision student's precision and fine-tune it under a frozen teacher."""
    train, test, normalizer = _prepare_data(cfg, data)
    if prime is None:
        if not cfg.prime_checkpoint:
            raise ConfigError("scheme C needs a full-precision student checkpoint to prime from")
        prime, _ = load_checkpoint(cfg.prime_checkpoint)
    if not prime.quant_spec.is_full_precision:
        raise ConfigError(f"scheme C primes from a full-precision student; checkpoint is {prime.quant_spec}")
    if prime.spec != cfg.student_spec:
        raise ConfigError(f"prime checkpoint is a {prime.spec}, config asks for {cfg.student_spec}")
    teacher = _load_teacher(cfg, teacher)
    if cache is None and cfg.logit_cache_path and teacher is None:
        cache = read_logit_cache(cfg.logit_cache_path)
    if teacher is None and cache is None:
        raise ConfigError("scheme C needs a trained teacher checkpoint or a logit cache")
    student = apply_policy(copy.deepcopy(prime), cfg.student_quant)
    before = evaluate(student, test, normalizer)
    records = [EpochRecord(0, "pre-finetune", before)]
    records += _train(cfg, student, train, test, normalizer, teacher=None if cache is not None else teacher,
                      cache=cache)
    return SchemeResult(student, records, teacher=teacher, normalizer=normalizer,
                        info={"pre_finetune_error": before})


def run(cfg: RunConfig, data=None) -> SchemeResult:
    drivers = {"A": run_scheme_a, "B": run_scheme_b, "C": run_scheme_c, "BASELINE": run_baseline}
    return drivers[cfg.scheme](cfg, data)


def epochs_to_fraction(accuracies, fraction: float = 0.97) -> int:
    """First 1-based epoch whose accuracy reaches ``fraction`` of the final accuracy."""
    acc = list(accuracies)
    target = fraction * acc[-1]
    for i, a in enumerate(acc, 1):
        if a >= target:
            return i
    return len(acc)
