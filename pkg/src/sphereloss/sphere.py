"""Geometry on the unit hypersphere."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionMismatch, ZeroVector

ACOS_EPS = 1e-7
ZERO_NORM = 1e-12


def normalize(v, axis: int = -1) -> np.ndarray:
    """Scale ``v`` to unit L2 norm along ``axis``.

    Raises:
        ZeroVector: if any slice has norm below 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[axis] < 2:
        raise DimensionMismatch(f"need dimension >= 2, got {v.shape[axis]}")
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm < ZERO_NORM):
        raise ZeroVector("cannot normalize a (near) zero vector")
    return v / norm


def angle_between(x, w) -> float:
    """Angle in radians between two unit vectors.

    The cosine is clamped to ``[-1 + eps, 1 - eps]`` before ``arccos``, except
    that a raw dot product of exactly +-1 reports exactly 0 or pi.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape != w.shape:
        raise DimensionMismatch(f"shapes {x.shape} and {w.shape} differ")
    c = float(np.dot(x, w))
    if c >= 1.0:
        return 0.0
    if c <= -1.0:
        return float(np.pi)
    return float(np.arccos(np.clip(c, -1.0 + ACOS_EPS, 1.0 - ACOS_EPS)))


def clamped_acos_with_grad(c):
    """``arccos`` of the clamped cosine and its derivative at the clamped value.

    The derivative ``-1/sqrt(1 - c**2)`` is evaluated at the clamped cosine, so
    it is always finite and <= -1.  Works elementwise on arrays.
    """
    c = np.clip(np.asarray(c, dtype=np.float64), -1.0 + ACOS_EPS, 1.0 - ACOS_EPS)
    theta = np.arccos(c)
    dtheta = -1.0 / np.sqrt(1.0 - c * c)
    if theta.ndim == 0:
        return float(theta), float(dtheta)
    return theta, dtheta


def normalize_backward(v_hat: np.ndarray, norm: np.ndarray, grad_hat: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. normalized rows back to the raw rows.

    ``d(v/|v|) = (I - v_hat v_hat^T) dv / |v|``, applied row-wise.
    """
    radial = np.sum(grad_hat * v_hat, axis=-1, keepdims=True)
    return (grad_hat - radial * v_hat) / norm
