"""Prior transition kernels on finite state spaces.

A :class:`TransitionKernel` is a row-stochastic matrix (row = source state,
column = target state). Kernels built from Gaussian heat kernels at small
noise carry an exact log-matrix as well, because their far off-diagonal
entries underflow in double precision long before the bridge potentials
that multiply them do.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError

__all__ = [
    "Grid1D",
    "TransitionKernel",
    "LOG_TINY",
    "build_heat_kernel",
    "identity_kernel",
    "compose",
    "propagate",
    "as_marginal",
    "discretize_density",
    "discretize_gaussian",
    "log_matmul",
    "write_matrix_csv",
    "read_matrix_csv",
]

#: Entries below exp(LOG_TINY) are at risk of underflow once multiplied by
#: potentials; kernels containing such entries are handled in log-space.
LOG_TINY = math.log(1e-300)

_STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True)
class Grid1D:
    lower: float
    upper: float
    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise DomainError(f"n_points must be an integer >= 2, got {self.n_points}")
        if not self.upper > self.lower:
            raise DomainError(f"upper ({self.upper}) must exceed lower ({self.lower})")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.n_points)

    @property
    def spacing(self) -> float:
        return (self.upper - self.lower) / (self.n_points - 1)


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Row-stochastic transition matrix with an optional exact log-matrix."""

    matrix: np.ndarray
    step_duration: float = 1.0
    log_matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        P = np.array(self.matrix, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.size == 0:
            raise DomainError(f"kernel must be a nonempty square matrix, got shape {P.shape}")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise DomainError("kernel entries must be finite and nonnegative")
        rows = P.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > _STOCHASTIC_TOL:
            raise DomainError(
                f"kernel rows must sum to 1 (max deviation {np.max(np.abs(rows - 1.0)):.3e})"
            )
        P.setflags(write=False)
        object.__setattr__(self, "matrix", P)
        if self.log_matrix is not None:
            L = np.array(self.log_matrix, dtype=float)
            if L.shape != P.shape:
                raise DomainError("log_matrix shape does not match matrix")
            L.setflags(write=False)
            object.__setattr__(self, "log_matrix", L)

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    @property
    def log(self) -> np.ndarray:
        """Entrywise logarithm (``-inf`` at structural zeros)."""
        if self.log_matrix is not None:
            return self.log_matrix
        with np.errstate(divide="ignore"):
            return np.log(self.matrix)

    @property
    def needs_log(self) -> bool:
        """True when some positive entry is too small for linear-space iteration."""
        if self.log_matrix is None:
            P = self.matrix
            return bool(np.any((P > 0) & (P < math.exp(LOG_TINY))))
        L = self.log_matrix
        return bool(np.any(np.isfinite(L) & (L < LOG_TINY)))

    def to_csv(self, path) -> None:
        write_matrix_csv(path, self.matrix)

    @classmethod
    def from_csv(cls, path, step_duration: float = 1.0) -> "TransitionKernel":
        return cls(read_matrix_csv(path), step_duration)


def identity_kernel(n: int, step_duration: float = 0.0) -> TransitionKernel:
    return TransitionKernel(np.eye(n), step_duration)


def build_heat_kernel(grid: Grid1D, epsilon: float, dt: float) -> TransitionKernel:
    """Grid heat kernel ``K_ij ∝ exp(-(x_i - x_j)^2 / (2 epsilon dt))``.

    Rows are truncated to the grid and renormalised. The exact log-matrix is
    kept alongside the (possibly underflowed) linear matrix.
    """
    if not (epsilon > 0 and dt > 0):
        raise DomainError(f"epsilon and dt must be positive, got {epsilon}, {dt}")
    scale = 2.0 * epsilon * dt
    x = grid.points
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        L = -np.square(x[:, None] - x[None, :]) / scale
    if not np.all(np.isfinite(np.diag(L))) or np.any(np.isnan(L)):
        raise DomainError(
            f"epsilon*dt={epsilon * dt:.3e} underflows the kernel scale; "
            "rescale the grid or use a larger noise level"
        )
    L = L - logsumexp(L, axis=1, keepdims=True)
    P = np.exp(L)
    # exp() of a normalised log-row can miss unit mass by a few ulps
    P /= P.sum(axis=1, keepdims=True)
    return TransitionKernel(P, dt, L)


def log_matmul(LA: np.ndarray, LB: np.ndarray, block: int = 16) -> np.ndarray:
    """``log(exp(LA) @ exp(LB))`` without leaving log-space."""
    n, k = LA.shape
    if LB.shape[0] != k:
        raise DomainError(f"dimension mismatch: {LA.shape} @ {LB.shape}")
    out = np.empty((n, LB.shape[1]))
    for i in range(0, n, block):
        out[i:i + block] = logsumexp(LA[i:i + block, :, None] + LB[None, :, :], axis=1)
    return out


def _product(a: TransitionKernel, b: TransitionKernel) -> TransitionKernel:
    if a.n_states != b.n_states:
        raise DomainError(f"cannot compose kernels of sizes {a.n_states} and {b.n_states}")
    L = None
    if a.needs_log or b.needs_log:
        L = log_matmul(a.log, b.log)
        P = np.exp(L)
    else:
        P = a.matrix @ b.matrix
    P /= P.sum(axis=1, keepdims=True)
    return TransitionKernel(P, a.step_duration + b.step_duration, L)


def compose(kernels: Sequence[TransitionKernel]) -> TransitionKernel:
    """Multi-step kernel ``K_1 @ K_2 @ ... @ K_N``.

    Reduction is a balanced tree memoised on kernel identity, so a chain of
    N copies of one kernel costs O(log N) products.
    """
    kernels = list(kernels)
    if not kernels:
        raise DomainError("compose needs at least one kernel")
    n = kernels[0].n_states
    for K in kernels:
        if K.n_states != n:
            raise DomainError(f"dimension mismatch in chain: {K.n_states} vs {n}")
    memo: dict[tuple, TransitionKernel] = {}

    def reduce(lo, hi):
        key = tuple(id(k) for k in kernels[lo:hi])
        if key in memo:
            return memo[key]
        if hi - lo == 1:
            out = kernels[lo]
        else:
            mid = (lo + hi) // 2
            out = _product(reduce(lo, mid), reduce(mid, hi))
        memo[key] = out
        return out

    return reduce(0, len(kernels))


def as_marginal(p, n: int | None = None) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise DomainError(f"marginal must be a vector, got shape {p.shape}")
    if n is not None and p.size != n:
        raise DomainError(f"marginal has {p.size} entries, expected {n}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DomainError("marginal entries must be finite and nonnegative")
    if abs(p.sum() - 1.0) > _STOCHASTIC_TOL:
        raise DomainError(f"marginal must sum to 1 (sum={p.sum():.15g})")
    return p


def propagate(p, K: TransitionKernel) -> np.ndarray:
    """Push a marginal forward one kernel: ``p @ K``."""
    p = as_marginal(p, K.n_states)
    q = p @ K.matrix
    return q / q.sum()


def discretize_density(grid: Grid1D, pdf: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Midpoint-rule probability vector for a density, renormalised on the grid."""
    w = np.asarray(pdf(grid.points), dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise DomainError("density must be finite, nonnegative and not identically zero on the grid")
    return w / w.sum()


def discretize_gaussian(grid: Grid1D, mean: float, variance: float) -> np.ndarray:
    if variance <= 0:
        raise DomainError(f"variance must be positive, got {variance}")
    x = grid.points
    logw = -np.square(x - mean) / (2.0 * variance)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def write_matrix_csv(path, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(range(M.shape[1]))
        for row in M:
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DomainError(f"{path}: expected a header row and at least one data row")
    width = len(rows[0])
    data = []
    for r in rows[1:]:
        if not r:
            continue
        if len(r) != width:
            raise DomainError(f"{path}: ragged row of length {len(r)} (header has {width})")
        data.append([float(v) for v in r])
    return np.array(data)
