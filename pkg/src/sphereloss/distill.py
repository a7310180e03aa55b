"""Embedding-level distillation from a fixed teacher."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigInvalid, DimensionMismatch, ZeroVector
from .sphere import ZERO_NORM, normalize, normalize_backward

COSINE_GAP = "CosineGap"
SQUARED_L2 = "SquaredL2"


@dataclass(frozen=True)
class DistillSpec:
    mode: str = COSINE_GAP
    weight: float = 1.0

    def __post_init__(self):
        if self.mode not in (COSINE_GAP, SQUARED_L2):
            raise ConfigInvalid(f"unknown distillation mode {self.mode!r}")
        if self.weight < 0:
            raise ConfigInvalid("distillation weight must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "DistillSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def distill_loss_grad(spec: DistillSpec, student, teacher):
    """Distillation loss and its gradient w.r.t. the student embeddings.

    ``CosineGap``: ``mean(1 - cos(student_i, teacher_i))``.
    ``SquaredL2``: ``mean(|student_i - teacher_i|^2) / d``.
    The teacher is a constant and gets no gradient.  The returned loss is
    unweighted; ``spec.weight`` is applied by the caller.
    """
    S = np.asarray(student, dtype=np.float64)
    T = np.asarray(teacher, dtype=np.float64)
    if S.shape != T.shape or S.ndim != 2:
        raise DimensionMismatch(f"student {S.shape} and teacher {T.shape} must be matching (N, d) batches")
    n, d = S.shape
    if spec.mode == SQUARED_L2:
        diff = S - T
        return float(np.sum(diff * diff) / (n * d)), 2.0 * diff / (n * d)
    s_norm = np.linalg.norm(S, axis=1, keepdims=True)
    if np.any(s_norm < ZERO_NORM):
        raise ZeroVector("zero student embedding")
    s_hat = S / s_norm
    t_hat = normalize(T)
    cos = np.sum(s_hat * t_hat, axis=1)
    loss = float(np.mean(1.0 - cos))
    grad = normalize_backward(s_hat, s_norm, -t_hat / n)
    return loss, grad
