"""Central finite differences for checking analytic gradients."""

from __future__ import annotations

import numpy as np

EPS = np.finfo(np.float64).eps


def numerical_gradient(f, x: np.ndarray, step: float = 1e-6, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    If ``indices`` (flat positions) is given, only those entries are filled;
    the others stay zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return grad


def fd_noise(fvalue: float, step: float = 1e-6) -> float:
    """Rounding noise of a central difference of a function of size ``|fvalue|``."""
    return 10.0 * EPS * max(1.0, abs(float(fvalue))) / step


def max_relative_error(analytic, numeric, floor: float = 0.0) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``.

    Pass ``floor = fd_noise(f, step) / rtol`` so entries that are zero up to
    finite-difference rounding noise are judged against that noise instead.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, np.finfo(float).tiny))
    return float(np.max(np.abs(a - n) / denom))


def check_gradient(f, x: np.ndarray, analytic, step: float = 1e-6, rtol: float = 1e-4, indices=None) -> float:
    """Relative error of ``analytic`` against central differences of ``f``.

    Only ``indices`` are compared when given.
    """
    f0 = f()
    numeric = numerical_gradient(f, x, step=step, indices=indices)
    analytic = np.asarray(analytic, dtype=np.float64)
    if indices is not None:
        idx = np.asarray(list(indices))
        analytic = analytic.reshape(-1)[idx]
        numeric = numeric.reshape(-1)[idx]
    return max_relative_error(analytic, numeric, floor=fd_noise(f0, step) / rtol)
