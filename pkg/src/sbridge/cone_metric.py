"""Hilbert projective metric on the nonnegative orthant.

Distances are formed from log-ratios so that vectors whose entries span
hundreds of orders of magnitude (small-noise heat kernels) stay finite.
Points on the cone boundary are allowed where noted; distances between
vectors with different zero patterns are ``INFINITE``.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

__all__ = [
    "INFINITE",
    "hilbert_distance",
    "log_hilbert_distance",
    "projective_diameter",
    "birkhoff_ratio",
]

#: Sentinel for unbounded projective distances. It is an ordinary IEEE
#: infinity, so ``d < INFINITE`` holds for every finite ``d``.
INFINITE = math.inf


def _as_positive_vector(x, name):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise DomainError(f"{name} must be a nonempty 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} has non-finite entries")
    if np.any(x <= 0):
        raise DomainError(f"{name} has nonpositive entries; the metric lives on the cone interior")
    return x


def hilbert_distance(x, y) -> float:
    """Hilbert projective distance ``log(max(x/y) / min(x/y))``.

    Both arguments must be strictly positive and of equal length. The
    result is invariant under independent positive rescaling of ``x`` and
    ``y``.

    >>> round(hilbert_distance([1, 2], [2, 1]), 6)
    1.386294
    """
    x = _as_positive_vector(x, "x")
    y = _as_positive_vector(y, "y")
    if x.shape != y.shape:
        raise DomainError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return log_hilbert_distance(np.log(x), np.log(y))


def log_hilbert_distance(log_x, log_y) -> float:
    """Hilbert distance between two vectors given by their logarithms.

    Entries equal to ``-inf`` denote zeros. Vectors with identical zero
    patterns are compared on their common support; differing patterns give
    ``INFINITE``.
    """
    log_x = np.asarray(log_x, dtype=float)
    log_y = np.asarray(log_y, dtype=float)
    if log_x.shape != log_y.shape:
        raise DomainError(f"dimension mismatch: {log_x.shape} vs {log_y.shape}")
    fx = np.isfinite(log_x)
    fy = np.isfinite(log_y)
    if np.any(fx != fy):
        return INFINITE
    if not np.any(fx):
        raise DomainError("both vectors are zero")
    diff = log_x[fx] - log_y[fx]
    return float(diff.max() - diff.min())


def _as_nonnegative_matrix(E):
    E = np.asarray(E, dtype=float)
    if E.ndim != 2 or E.size == 0:
        raise DomainError(f"expected a nonempty matrix, got shape {E.shape}")
    if not np.all(np.isfinite(E)) or np.any(E < 0):
        raise DomainError("matrix entries must be finite and nonnegative")
    if np.any(E.sum(axis=0) == 0):
        raise DomainError("matrix has a zero column; it does not map the cone interior into itself")
    return E


def projective_diameter(E) -> float:
    """Projective diameter of the linear map ``x -> E @ x``.

    The image of the cone is generated by the columns of ``E``, so the
    supremum is attained on column pairs::

        max_{j,k} log max_{i,l} (E_ij E_lk) / (E_lj E_ik)

    Returns ``INFINITE`` when two columns have different zero patterns.
    """
    E = _as_nonnegative_matrix(E)
    with np.errstate(divide="ignore"):
        L = np.log(E)
    zero = E == 0
    if np.any(zero):
        # columns with differing supports are infinitely far apart
        patterns = np.unique(zero.T, axis=0)
        if patterns.shape[0] > 1:
            return INFINITE
        L = L[~zero[:, 0]]
    best = 0.0
    # one column against all others at a time keeps memory at O(n*m)
    for j in range(L.shape[1] - 1):
        diff = L[:, j:j + 1] - L[:, j + 1:]
        spread = diff.max(axis=0) - diff.min(axis=0)
        best = max(best, float(spread.max()))
    return best


def birkhoff_ratio(E) -> float:
    """Birkhoff contraction ratio ``tanh(diameter / 4)`` of a positive linear map.

    Lies in ``[0, 1]``; equals 1 when the diameter is infinite.
    """
    delta = projective_diameter(E)
    if delta == INFINITE:
        return 1.0
    return math.tanh(delta / 4.0)
