"""Maintaining a prescribed stationary covariance by linear state feedback.

With ``u = -K x`` the closed loop ``dX = (A - BK) X dt + B1 dW`` keeps
``N(0, Sigma)`` invariant iff

    A Sigma + Sigma A^T + B1 B1^T - B X^T - X B^T = 0,    X = Sigma K^T.

Feasibility is a linear least-squares question in ``X``; the minimum-power
gain minimises ``trace(K Sigma K^T) = trace(X^T Sigma^{-1} X)`` on that
affine set and is found from the KKT system of the equality-constrained QP.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .errors import DomainError, InfeasibleError

__all__ = [
    "StationaryProblem",
    "FeasibilityReport",
    "StationaryGain",
    "check_feasibility",
    "optimal_stationary_gain",
    "uncontrolled_covariance",
    "closed_loop_covariance",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class StationaryProblem:
    A: np.ndarray
    B: np.ndarray
    B1: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise DomainError(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        B1 = np.asarray(self.B1, dtype=float).reshape(n, -1)
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if S.shape != (n, n):
            raise DomainError(f"Sigma must be {n}x{n}, got {S.shape}")
        if np.max(np.abs(S - S.T)) > 1e-12:
            raise DomainError("Sigma is not symmetric")
        if np.linalg.eigvalsh(S).min() <= 0:
            raise DomainError("Sigma is not positive definite")
        for name, M in (("A", A), ("B", B), ("B1", B1), ("Sigma", S)):
            object.__setattr__(self, name, M)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def drift_term(self) -> np.ndarray:
        """``A Sigma + Sigma A^T + B1 B1^T``, the part feedback must cancel."""
        return self.A @ self.Sigma + self.Sigma @ self.A.T + self.B1 @ self.B1.T


@dataclass
class FeasibilityReport:
    feasible: bool
    residual: float
    threshold: float
    X: np.ndarray | None = None

    def to_dict(self):
        return {
            "feasible": self.feasible,
            "residual": self.residual,
            "threshold": self.threshold,
            "X": None if self.X is None else self.X.tolist(),
        }


@dataclass
class StationaryGain:
    K: np.ndarray
    power: float
    lyapunov_residual: float
    closed_loop_eigenvalues: np.ndarray
    stable: bool
    degenerate: bool
    kkt_rank: int
    report: FeasibilityReport

    def to_dict(self):
        ev = self.closed_loop_eigenvalues
        return {
            "feasible": self.report.feasible,
            "feasibility_residual": self.report.residual,
            "K": self.K.tolist(),
            "J_power": self.power,
            "lyapunov_residual": self.lyapunov_residual,
            "closed_loop_eigenvalues": [[float(z.real), float(z.imag)] for z in ev],
            "stable": self.stable,
            "degenerate": self.degenerate,
            "kkt_rank": self.kkt_rank,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _constraint_matrix(B):
    """Matrix of ``X -> B X^T + X B^T`` acting on ``vec(X)`` (column-major)."""
    n, m = B.shape
    cols = []
    for j in range(m):
        for i in range(n):
            E = np.zeros((n, m))
            E[i, j] = 1.0
            cols.append((B @ E.T + E @ B.T).ravel(order="F"))
    return np.column_stack(cols)


def check_feasibility(prob: StationaryProblem) -> FeasibilityReport:
    """Least-squares test of whether feedback can hold ``Sigma`` stationary."""
    n, m = prob.B.shape
    C = prob.drift_term
    L = _constraint_matrix(prob.B)
    x, *_ = np.linalg.lstsq(L, C.ravel(order="F"), rcond=None)
    X = x.reshape((n, m), order="F")
    residual = float(np.linalg.norm(C - prob.B @ X.T - X @ prob.B.T))
    threshold = 1e-8 * (1.0 + float(np.linalg.norm(C)))
    feasible = residual <= threshold
    return FeasibilityReport(feasible, residual, threshold, X if feasible else None)


def optimal_stationary_gain(prob: StationaryProblem) -> StationaryGain:
    """Minimum-power gain ``K`` maintaining ``Sigma``.

    Solves ``min trace(K Sigma K^T)`` subject to the stationary Lyapunov
    constraint through the KKT system in ``vec(X)``. Redundant constraint
    rows (the symmetric constraint has at most ``n(n+1)/2`` independent
    rows, fewer when ``B`` is thin) are removed by an SVD of the constraint
    matrix before the KKT solve.
    """
    report = check_feasibility(prob)
    if not report.feasible:
        raise InfeasibleError(
            f"Sigma cannot be maintained by state feedback (residual {report.residual:.3e})",
            report=report,
        )
    n, m = prob.B.shape
    C = prob.drift_term
    L = _constraint_matrix(prob.B)
    c = C.ravel(order="F")
    U, s, _ = np.linalg.svd(L, full_matrices=False)
    r = int(np.sum(s > max(L.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)))
    Lr = U[:, :r].T @ L
    cr = U[:, :r].T @ c

    W = np.linalg.inv(prob.Sigma)
    Q = np.kron(np.eye(m), W)
    kkt = np.block([[2.0 * Q, Lr.T], [Lr, np.zeros((r, r))]])
    rhs = np.concatenate([np.zeros(n * m), cr])
    rank = int(np.linalg.matrix_rank(kkt))
    degenerate = rank < kkt.shape[0]
    if degenerate:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    else:
        sol = np.linalg.solve(kkt, rhs)
    X = sol[: n * m].reshape((n, m), order="F")
    K = X.T @ W

    F = prob.A - prob.B @ K
    lyap = F @ prob.Sigma + prob.Sigma @ F.T + prob.B1 @ prob.B1.T
    lyap_res = float(np.linalg.norm(lyap))
    eig = np.linalg.eigvals(F)
    stable = bool(np.all(eig.real < 0))
    if not stable:
        log.warning("closed loop A - BK is not Hurwitz: eigenvalues %s", eig)
    power = float(np.trace(K @ prob.Sigma @ K.T))
    return StationaryGain(K, power, lyap_res, eig, stable, degenerate, rank, report)


def uncontrolled_covariance(A, B1) -> np.ndarray:
    """Stationary covariance of ``dX = A X dt + B1 dW`` (``A`` Hurwitz)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B1 = np.asarray(B1, dtype=float).reshape(A.shape[0], -1)
    if np.any(np.linalg.eigvals(A).real >= 0):
        raise DomainError("A is not Hurwitz; no stationary covariance exists")
    S = solve_continuous_lyapunov(A, -B1 @ B1.T)
    return 0.5 * (S + S.T)


def closed_loop_covariance(A, B, B1, K) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    return uncontrolled_covariance(A - B @ np.atleast_2d(K), B1)
