"""Angular-margin softmax losses with analytic gradients.

Every angular variant maps the angle ``theta`` between a normalized embedding
and a normalized class center to a logit; the target class may use a
different map than the other classes.  Cross-entropy is then taken over the
scaled logits.  Gradients are returned w.r.t. the *raw* embeddings and class
centers, i.e. through both normalizations and the clamped ``arccos``.

Target-logit maps (``s`` = scale):

=============== ================================ ======================
variant         target                           non-target
=============== ================================ ======================
NSoftmax        ``s cos(theta)``                 ``s cos(theta)``
CosFace         ``s (cos(theta) - m)``           ``s cos(theta)``
ArcFace         ``s cos(theta + m)``             ``s cos(theta)``
LiArcFace       ``s (pi - 2 (theta + m)) / pi``  ``s (pi - 2 theta) / pi``
CombinedMargin  ``s (cos(m1 theta + m2) - m3)``  ``s cos(theta)``
=============== ================================ ======================
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ._io import fmt_sig9, write_csv
from .exceptions import (
    ConfigInvalid,
    DimensionMismatch,
    LabelOutOfRange,
    NonFiniteInput,
    UnsupportedRole,
    ZeroVector,
)
from .sphere import ZERO_NORM, clamped_acos_with_grad, normalize_backward

SOFTMAX = "Softmax"
NSOFTMAX = "NSoftmax"
COSFACE = "CosFace"
ARCFACE = "ArcFace"
LIARCFACE = "LiArcFace"
COMBINED = "CombinedMargin"
VARIANTS = (SOFTMAX, NSOFTMAX, COSFACE, ARCFACE, LIARCFACE, COMBINED)
ANGULAR_VARIANTS = VARIANTS[1:]


@dataclass(frozen=True)
class MarginLossSpec:
    """Loss variant plus its scale and margin parameters.

    ``m`` is in radians for the angular variants and in cosine units for
    CosFace.  ``arcface_clip`` switches ArcFace to the monotone fallback
    ``cos(theta) - m sin(m)`` whenever ``theta + m > pi``.
    """

    variant: str = LIARCFACE
    s: float = 64.0
    m: float = 0.4
    m1: float = 1.0
    m2: float = 0.3
    m3: float = 0.2
    arcface_clip: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"unknown loss variant {self.variant!r}; choose from {VARIANTS}")
        if not self.s > 0:
            raise ConfigInvalid(f"scale s must be > 0, got {self.s}")
        if self.variant in (ARCFACE, LIARCFACE) and not 0 <= self.m < math.pi / 2:
            raise ConfigInvalid(f"{self.variant} margin must lie in [0, pi/2), got {self.m}")
        if self.variant == COSFACE and not 0 <= self.m < 1:
            raise ConfigInvalid(f"CosFace margin must lie in [0, 1), got {self.m}")

    @classmethod
    def from_dict(cls, d: dict) -> "MarginLossSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        extra = set(d) - set(known)
        if extra:
            raise ConfigInvalid(f"unknown loss fields {sorted(extra)}")
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def label(self) -> str:
        if self.variant == COMBINED:
            return f"{self.variant}(m1={self.m1},m2={self.m2},m3={self.m3})"
        if self.variant in (SOFTMAX, NSOFTMAX):
            return self.variant
        clip = ",clip" if self.variant == ARCFACE and self.arcface_clip else ""
        return f"{self.variant}(m={self.m}{clip})"


def _target_logit(spec: MarginLossSpec, theta):
    """Target logit and its derivative w.r.t. theta."""
    s, m = spec.s, spec.m
    v = spec.variant
    if v == NSOFTMAX:
        return s * np.cos(theta), -s * np.sin(theta)
    if v == COSFACE:
        return s * (np.cos(theta) - m), -s * np.sin(theta)
    if v == ARCFACE:
        z = s * np.cos(theta + m)
        dz = -s * np.sin(theta + m)
        if spec.arcface_clip:
            past = theta + m > np.pi
            z = np.where(past, s * (np.cos(theta) - m * math.sin(m)), z)
            dz = np.where(past, -s * np.sin(theta), dz)
        return z, dz
    if v == LIARCFACE:
        return s * (np.pi - 2.0 * (theta + m)) / np.pi, np.full_like(theta, -2.0 * s / np.pi)
    if v == COMBINED:
        a = spec.m1 * theta + spec.m2
        return s * (np.cos(a) - spec.m3), -s * spec.m1 * np.sin(a)
    raise UnsupportedRole(f"{v} has no angular logit; it is a linear head")


def _nontarget_logit(spec: MarginLossSpec, theta):
    s = spec.s
    if spec.variant == LIARCFACE:
        return s * (np.pi - 2.0 * theta) / np.pi, np.full_like(theta, -2.0 * s / np.pi)
    if spec.variant == SOFTMAX:
        raise UnsupportedRole("Softmax has no angular logit; it is a linear head")
    return s * np.cos(theta), -s * np.sin(theta)


def margin_logits(spec: MarginLossSpec, theta, is_target: bool):
    """Logit for an angle in the target or non-target role.

    Accepts scalars or arrays; returns the same kind.
    """
    th = np.asarray(theta, dtype=np.float64)
    z, _ = _target_logit(spec, th) if is_target else _nontarget_logit(spec, th)
    return float(z) if np.ndim(z) == 0 else z


def logit_derivative(spec: MarginLossSpec, theta, is_target: bool):
    """Analytic d(logit)/d(theta)."""
    th = np.asarray(theta, dtype=np.float64)
    _, dz = _target_logit(spec, th) if is_target else _nontarget_logit(spec, th)
    return float(dz) if np.ndim(dz) == 0 else dz


@dataclass
class LossOutput:
    loss: float
    probabilities: np.ndarray
    grad_x: np.ndarray
    grad_W: np.ndarray
    target_angles: np.ndarray
    logits: np.ndarray
    cosines: np.ndarray


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = np.max(z, axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _check_batch(X, W, labels):
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or W.ndim != 2:
        raise DimensionMismatch("X must be (N, d) and W must be (d, n)")
    if X.shape[0] < 1:
        raise DimensionMismatch("empty batch")
    if X.shape[1] != W.shape[0]:
        raise DimensionMismatch(f"embedding dim {X.shape[1]} != center dim {W.shape[0]}")
    if X.shape[1] < 2:
        raise DimensionMismatch("embedding dimension must be >= 2")
    if labels.shape != (X.shape[0],):
        raise DimensionMismatch("need one label per sample")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(W))):
        raise NonFiniteInput("X or W contains NaN/inf")
    if labels.size and (labels.min() < 0 or labels.max() >= W.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {W.shape[1]})")
    return X, W, labels.astype(np.int64)


def loss_forward_backward(spec: MarginLossSpec, X, W, labels) -> LossOutput:
    """Mean cross-entropy of the margin logits plus gradients w.r.t. raw X and W.

    Args:
        spec: angular loss variant (not ``Softmax``).
        X: raw embeddings, shape ``(N, d)``.
        W: raw class centers as columns, shape ``(d, n)``.
        labels: integer class per sample.
    """
    if spec.variant == SOFTMAX:
        raise UnsupportedRole("plain Softmax is a linear head; see sphereloss.nn.linear_softmax_loss")
    X, W, labels = _check_batch(X, W, labels)
    n_samples, n_classes = X.shape[0], W.shape[1]

    x_norm = np.linalg.norm(X, axis=1, keepdims=True)
    w_norm = np.linalg.norm(W, axis=0, keepdims=True)
    if np.any(x_norm < ZERO_NORM) or np.any(w_norm < ZERO_NORM):
        raise ZeroVector("zero embedding row or zero class-center column")
    x_hat = X / x_norm
    w_hat = W / w_norm

    cos = x_hat @ w_hat
    theta, dtheta_dc = clamped_acos_with_grad(cos)
    rows = np.arange(n_samples)
    is_target = np.zeros((n_samples, n_classes), dtype=bool)
    is_target[rows, labels] = True

    zt, dzt = _target_logit(spec, theta)
    zn, dzn = _nontarget_logit(spec, theta)
    z = np.where(is_target, zt, zn)
    dz_dtheta = np.where(is_target, dzt, dzn)

    logp = log_softmax(z)
    p = np.exp(logp)
    loss = float(-np.mean(logp[rows, labels]))

    dz = p.copy()
    dz[rows, labels] -= 1.0
    dz /= n_samples
    dcos = dz * dz_dtheta * dtheta_dc

    grad_x = normalize_backward(x_hat, x_norm, dcos @ w_hat.T)
    grad_w = normalize_backward(w_hat.T, w_norm.T, dcos.T @ x_hat).T

    return LossOutput(
        loss=loss,
        probabilities=p,
        grad_x=grad_x,
        grad_W=grad_w,
        target_angles=theta[rows, labels],
        logits=z,
        cosines=cos,
    )


def logit_curve_table(spec: MarginLossSpec, n_points: int) -> np.ndarray:
    """Target-role logit sampled on a uniform grid over ``[0, pi]``.

    Returns an ``(n_points, 2)`` array of ``(theta, target_logit)`` rows.
    """
    if n_points < 2:
        raise ConfigInvalid("n_points must be >= 2")
    theta = np.linspace(0.0, np.pi, int(n_points))
    return np.column_stack([theta, margin_logits(spec, theta, True)])


def write_logit_curve_csv(path, table: np.ndarray, comment: str | None = None):
    return write_csv(path, ["theta", "target_logit"], table.tolist(), fmt=fmt_sig9, comment=comment)


@dataclass
class OverlapMap:
    """Binary-classification decision regions on a ``grid_n x grid_n`` angle grid.

    ``mask[i, j]`` is True when the cell ``(theta[i], theta[j])`` lies in both
    class margin regions at once.
    """

    theta: np.ndarray
    mask: np.ndarray

    @property
    def overlap_fraction(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.mask.size

    @property
    def overlap_cells(self) -> set:
        i, j = np.nonzero(self.mask)
        return {(float(self.theta[a]), float(self.theta[b])) for a, b in zip(i, j)}

    def contains(self, theta1: float, theta2: float) -> bool:
        i = int(np.argmin(np.abs(self.theta - theta1)))
        j = int(np.argmin(np.abs(self.theta - theta2)))
        return bool(self.mask[i, j])

    def rows(self):
        n = self.theta.size
        for i in range(n):
            for j in range(n):
                yield (float(self.theta[i]), float(self.theta[j]), bool(self.mask[i, j]))

    def write_csv(self, path, comment: str | None = None):
        return write_csv(path, ["theta1", "theta2", "in_overlap"], self.rows(), fmt=fmt_sig9, comment=comment)


def overlap_map(spec: MarginLossSpec, grid_n: int) -> OverlapMap:
    """Cells claimed by the margin regions of both classes simultaneously.

    A cell ``(theta1, theta2)`` belongs to class 1's region when the target
    logit at ``theta1`` beats the non-target logit at ``theta2``, and to class
    2's region symmetrically.
    """
    if grid_n < 2:
        raise ConfigInvalid("grid_n must be >= 2")
    theta = np.linspace(0.0, np.pi, int(grid_n))
    tgt = margin_logits(spec, theta, True)
    non = margin_logits(spec, theta, False)
    class1 = tgt[:, None] > non[None, :]
    class2 = tgt[None, :] > non[:, None]
    return OverlapMap(theta=theta, mask=class1 & class2)
