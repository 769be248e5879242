"""Teacher soft targets and the distillation objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 10.0
    lam: float = 0.5  # imitation factor

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"imitation factor must lie in [0, 1], got {self.lam}")


@dataclass
class PrivilegedBatch:
    soft_targets: np.ndarray
    source_step: int = 0


def soften(teacher_logits, temperature: float, source_step: int = 0) -> PrivilegedBatch:
    """Row-wise softmax of ``teacher_logits / temperature``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = teacher_logits.data if isinstance(teacher_logits, ad.Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("teacher logits must be finite")
    return PrivilegedBatch(ad._softmax(z / temperature), source_step)


def one_hot(labels, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels)]


def distill_loss(student_logits: ad.Tensor, labels, privileged, cfg: DistillConfig) -> ad.Tensor:
    """(1 - lam) * CE(labels, softmax(s/T)) + lam * CE(z, softmax(s/T)), batch mean.

    Both branches see the student logits softened by the same temperature.
    A ``None`` privileged batch is only allowed with ``lam == 0``.
    """
    if not 0.0 <= cfg.lam <= 1.0:
        raise ValueError(f"imitation factor must lie in [0, 1], got {cfg.lam}")
    if not isinstance(student_logits, ad.Tensor):
        student_logits = ad.Tensor(student_logits)
    n, c = student_logits.shape
    y = one_hot(labels, c)
    s = ad.scale(student_logits, 1.0 / cfg.temperature) if cfg.temperature != 1.0 else student_logits
    loss = ad.scale(ad.cross_entropy_with_logits(s, y), 1.0 - cfg.lam)
    if cfg.lam > 0:
        if privileged is None:
            raise ValueError("lam > 0 needs teacher soft targets")
        z = privileged.soft_targets if isinstance(privileged, PrivilegedBatch) else np.asarray(privileged)
        loss = ad.add(loss, ad.scale(ad.cross_entropy_with_logits(s, z), cfg.lam))
    return loss


def combined_objective(loss, relaxed_costs, alpha: float):
    """``loss + alpha * sum(relaxed_costs)``; accepts a tensor or a float loss."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    penalty = alpha * float(np.sum(relaxed_costs)) if np.ndim(relaxed_costs) else alpha * float(relaxed_costs)
    if isinstance(loss, ad.Tensor):
        return ad.add_const(loss, penalty) if penalty != 0.0 else loss
    return float(loss) + penalty
