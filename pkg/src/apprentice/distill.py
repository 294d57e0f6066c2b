"""Joint teacher/student objective with temperature-softened teacher targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, cross_entropy, softmax


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    tau: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("at least one of alpha, beta, gamma must be nonzero")


@dataclass
class Prediction:
    logits: Tensor | None
    probs: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> Prediction:
        return cls(logits=logits, probs=softmax(logits))


def soft_targets(teacher_logits, tau: float) -> np.ndarray:
    """``softmax(z / tau)`` as a constant array; never carries gradient."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    z = z / z.dtype.type(tau) if np.issubdtype(z.dtype, np.floating) else z / tau
    return softmax(Tensor(z)).data


@dataclass
class LossTerms:
    total: Tensor
    teacher_ce: float | None
    student_ce: float
    distill: float


def _check_one_hot(y: np.ndarray) -> None:
    ok = np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)
    if not ok:
        raise ValueError("hard-label terms need one-hot ground truth rows")


def loss_terms(y, teacher: Prediction | None, student: Prediction, cfg: DistillConfig,
               teacher_trainable: bool = True, soft: np.ndarray | None = None) -> LossTerms:
    """Evaluate ``alpha*H(y,pT) + beta*H(y,pA) + gamma*H(soft(zT), pA)``.

    With ``teacher_trainable`` false the first term is dropped entirely, so
    no gradient can reach the teacher.  The distillation target is always a
    constant.  ``soft`` overrides the teacher-derived soft targets.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=student.probs.dtype)
    if y.shape != student.probs.shape:
        raise ValueError(f"label extent {y.shape} does not match student output {student.probs.shape}")
    use_teacher_ce = teacher_trainable and cfg.alpha > 0
    if cfg.beta > 0 or use_teacher_ce:
        _check_one_hot(y)

    total = None
    t_ce = None
    if use_teacher_ce:
        if teacher is None:
            raise ValueError("teacher prediction required for the teacher cross-entropy term")
        if teacher.probs.shape != y.shape:
            raise ValueError(f"teacher output {teacher.probs.shape} does not match labels {y.shape}")
        h = cross_entropy(y, teacher.probs)
        t_ce = h.item()
        total = h * cfg.alpha

    h_s = cross_entropy(y, student.probs)
    term = h_s * cfg.beta
    total = term if total is None else total + term

    d_val = 0.0
    if cfg.gamma > 0 or soft is not None or teacher is not None:
        if soft is None:
            if teacher is None or teacher.logits is None:
                raise ValueError("teacher logits required for the distillation term")
            soft = soft_targets(teacher.logits, cfg.tau)
        soft = np.asarray(soft, dtype=student.probs.dtype)
        if soft.shape != student.probs.shape:
            raise ValueError(f"soft target extent {soft.shape} does not match student {student.probs.shape}")
        if cfg.gamma > 0:
            h_d = cross_entropy(soft, student.probs)
            d_val = h_d.item()
            total = total + h_d * cfg.gamma
        else:
            d_val = float(-(soft * np.log(np.clip(student.probs.data, 1e-12, 1.0))).sum() / len(soft))
    return LossTerms(total=total, teacher_ce=t_ce, student_ce=h_s.item(), distill=d_val)


def apprentice_loss(y, teacher: Prediction | None, student: Prediction, cfg: DistillConfig,
                    teacher_trainable: bool = True, soft: np.ndarray | None = None) -> Tensor:
    return loss_terms(y, teacher, student, cfg, teacher_trainable, soft).total
