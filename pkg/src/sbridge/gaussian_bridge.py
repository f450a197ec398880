"""Finite-horizon minimum-energy covariance steering (noise and control share B).

The optimal feedback is ``u = -B^T Pi(t) (x - mu(t)) + v(t)``, where ``Pi``
and ``H`` solve

    dPi/dt = -A^T Pi - Pi A + Pi B B^T Pi
    dH/dt  = -A^T H  - H A  - H B B^T H

with the boundary coupling ``Pi + H = Sigma^{-1}`` at both ends. Along the
optimal flow ``Sigma(t)^{-1} = Pi(t) + H(t)``. The mean is transferred
separately by the deterministic minimum-energy control ``v``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import expm

from ._rows import rowwise_matvec
from .errors import DomainError, NonConvergenceError, UnsupportedConfiguration

__all__ = [
    "LinearSystem",
    "GaussianState",
    "RiccatiSchedule",
    "controllability_rank",
    "solve_gauss_bridge",
    "covariance_path",
    "control_energy",
    "rk4_matrix_flow",
]

log = logging.getLogger(__name__)


def _mat(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or not np.all(np.isfinite(M)):
        raise DomainError(f"{name} must be a finite matrix")
    return M


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """``dX = A X dt + B u dt + B1 dW`` on ``[0, t_final]``."""

    A: np.ndarray
    B: np.ndarray
    B1: np.ndarray
    t_final: float = 1.0

    def __post_init__(self):
        A = _mat(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DomainError(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        B1 = np.asarray(self.B1, dtype=float).reshape(n, -1)
        if not self.t_final > 0:
            raise DomainError(f"horizon length must be positive, got {self.t_final}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "B1", B1)

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class GaussianState:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        C = _mat(self.covariance, "covariance")
        n = C.shape[0]
        if C.shape != (n, n):
            raise DomainError(f"covariance must be square, got {C.shape}")
        if np.max(np.abs(C - C.T)) > 1e-12:
            raise DomainError("covariance is not symmetric")
        if np.linalg.eigvalsh(C).min() <= 0:
            raise DomainError("covariance is not positive definite")
        m = np.zeros(n) if self.mean is None else np.asarray(self.mean, dtype=float).reshape(n)
        object.__setattr__(self, "covariance", C)
        object.__setattr__(self, "mean", m)

    @classmethod
    def centered(cls, covariance) -> "GaussianState":
        return cls(None, covariance)

    @property
    def n(self) -> int:
        return self.covariance.shape[0]


@dataclass
class RiccatiSchedule:
    times: np.ndarray
    Pi: np.ndarray
    H: np.ndarray
    Sigma: np.ndarray
    B: np.ndarray
    mean: np.ndarray
    feedforward: np.ndarray
    iterations: int = 0
    boundary_residuals: tuple[float, float] = (0.0, 0.0)
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def gains(self) -> np.ndarray:
        """Feedback gains ``K(t_k) = B^T Pi(t_k)``, shape ``(N+1, m, n)``."""
        return np.einsum("im,kin->kmn", self.B, self.Pi)

    def _interp(self, values, t):
        ts = self.times
        t = min(max(float(t), ts[0]), ts[-1])
        j = min(int(np.searchsorted(ts, t, side="right")) - 1, len(ts) - 2)
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (1.0 - w) * values[j] + w * values[j + 1]

    def gain_at(self, t) -> np.ndarray:
        return self.B.T @ self._interp(self.Pi, t)

    def mean_at(self, t) -> np.ndarray:
        return self._interp(self.mean, t)

    def feedforward_at(self, t) -> np.ndarray:
        return self._interp(self.feedforward, t)

    def control(self, t, x):
        """Optimal control at time ``t`` for states ``x`` (shape ``(n,)`` or ``(p, n)``)."""
        x = np.asarray(x, dtype=float)
        K = self.gain_at(t)
        return self.feedforward_at(t) - rowwise_matvec(x - self.mean_at(t), K)

    def to_csv(self, path) -> None:
        n = self.Pi.shape[1]
        m = self.B.shape[1]
        idx = [f"{i}{j}" for i in range(n) for j in range(n)]
        header = (["t"] + [f"Pi_{s}" for s in idx] + [f"H_{s}" for s in idx]
                  + [f"Sigma_{s}" for s in idx]
                  + [f"K_{i}{j}" for i in range(m) for j in range(n)])
        K = self.gains
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [t, *self.Pi[k].ravel(), *self.H[k].ravel(), *self.Sigma[k].ravel(), *K[k].ravel()]
                w.writerow([repr(float(v)) for v in row])


def controllability_rank(A, B) -> int:
    """Numerical rank of ``[B, AB, ..., A^{n-1} B]``."""
    A = _mat(A, "A")
    n = A.shape[0]
    if A.shape != (n, n):
        raise DomainError(f"A must be square, got {A.shape}")
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    if B.shape[0] != n:
        raise DomainError(f"B has {B.shape[0]} rows, A has {n}")
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    s = np.linalg.svd(np.hstack(blocks), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > n * np.finfo(float).eps * s[0]))


def rk4_matrix_flow(f, X0, times, backward=False):
    """Classical RK4 for a matrix ODE on a fixed grid; symmetrises every step."""
    N = len(times) - 1
    out = np.empty((N + 1,) + np.shape(X0))
    if backward:
        out[N] = X0
        order = range(N, 0, -1)
    else:
        out[0] = X0
        order = range(N)
    for k in order:
        if backward:
            t, h, j = times[k], times[k - 1] - times[k], k - 1
        else:
            t, h, j = times[k], times[k + 1] - times[k], k + 1
        X = out[k]
        k1 = f(t, X)
        k2 = f(t + h / 2, X + h / 2 * k1)
        k3 = f(t + h / 2, X + h / 2 * k2)
        k4 = f(t + h, X + h * k3)
        Y = X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(Y)):
            raise FloatingPointError(f"matrix flow left the finite range near t={times[j]:.6g}")
        out[j] = _sym(Y)
    return out


def _riccati_rhs(A, BBt):
    def f_pi(t, P):
        return -A.T @ P - P @ A + P @ BBt @ P

    def f_h(t, H):
        return -A.T @ H - H @ A - H @ BBt @ H

    return f_pi, f_h


class _RiccatiMap:
    """Exact time-``t`` map of ``dP = -A^T P - P A + sign * P BB^T P``.

    ``P(t) = Y X^{-1}`` with ``[X; Y]`` the linear Hamiltonian flow from
    ``[I; P(0)]``.
    """

    def __init__(self, A, BBt, sign, t):
        n = A.shape[0]
        M = np.block([[A, -sign * BBt], [np.zeros((n, n)), -A.T]])
        self.E = expm(M * t)
        self.n = n

    def __call__(self, P):
        n = self.n
        X = self.E[:n, :n] + self.E[:n, n:] @ P
        Y = self.E[n:, n:] @ P
        if np.linalg.cond(X) > 1e12:
            raise FloatingPointError("Riccati solution escapes in finite time")
        return _sym(np.linalg.solve(X.T, Y.T).T)


def _damped_boundary_iteration(residual, update, P0, tol, max_iter, damping):
    history = []
    step = damping
    prev = None
    for _ in range(max_iter):
        try:
            resid = residual(P0)
            candidate = update(P0)
        except FloatingPointError:
            if prev is None:
                raise NonConvergenceError("Riccati flow diverged from the initial boundary guess")
            # halve the last move and keep the smaller damping from here on
            step *= 0.5
            P0 = _sym(prev + 0.5 * (P0 - prev))
            continue
        history.append(resid)
        if resid < tol:
            return P0, history
        prev = P0
        P0 = _sym((1.0 - step) * P0 + step * candidate)
    raise NonConvergenceError(
        f"boundary iteration did not meet tol={tol:g} in {max_iter} iterations "
        f"(last residual {history[-1]:.3e})",
        last_change=history[-1] if history else None,
        log=history,
    )


def _sym_basis(n):
    basis = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = 1.0
            basis.append(E)
    return basis


def _newton_polish(residual, model, P0, tol, max_iter=50, fd_step=1e-6):
    """Zero ``residual(P0)`` by quasi-Newton steps with the Jacobian of ``model``.

    ``model`` is a cheap surrogate of ``residual`` (same map without
    discretisation error); its central-difference Jacobian is reused.
    """
    n = P0.shape[0]
    basis = _sym_basis(n)
    iu = np.triu_indices(n)
    J = np.column_stack([
        ((model(P0 + fd_step * E) - model(P0 - fd_step * E)) / (2 * fd_step))[iu] for E in basis
    ])
    history = []
    for _ in range(max_iter):
        try:
            r = residual(P0)
        except FloatingPointError as exc:
            raise NonConvergenceError(f"Riccati flow diverged during grid refinement: {exc}")
        history.append(float(np.linalg.norm(r)))
        if history[-1] < tol:
            return P0, history
        delta = np.linalg.lstsq(J, r[iu], rcond=None)[0]
        P0 = _sym(P0 - sum(c * E for c, E in zip(delta, basis)))
    raise NonConvergenceError(
        f"grid refinement of the boundary condition stalled at residual {history[-1]:.3e}",
        last_change=history[-1], log=history,
    )


def _mean_transfer(sys: LinearSystem, start: GaussianState, end: GaussianState, times):
    """Deterministic minimum-energy mean path and feedforward control."""
    n, m = sys.n, sys.B.shape[1]
    if not (np.any(start.mean) or np.any(end.mean)):
        return np.zeros((len(times), n)), np.zeros((len(times), m))
    A, B = sys.A, sys.B
    Q = B @ B.T
    big = np.block([[A, Q], [np.zeros((n, n)), -A.T]])

    def gramian(t):
        E = expm(big * t)
        return E[:n, n:] @ expm(A.T * t)

    tf = sys.t_final
    G = gramian(tf)
    miss = end.mean - expm(A * tf) @ start.mean
    lam = np.linalg.solve(G, miss)
    mean = np.empty((len(times), n))
    ff = np.empty((len(times), m))
    for k, t in enumerate(times):
        back = expm(A.T * (tf - t))
        ff[k] = B.T @ back @ lam
        mean[k] = expm(A * t) @ start.mean + gramian(t) @ back @ lam
    return mean, ff


def solve_gauss_bridge(
    sys: LinearSystem,
    start: GaussianState,
    end: GaussianState,
    n_grid: int = 400,
    tol: float = 1e-9,
    max_iter: int = 2000,
    damping: float = 0.5,
) -> RiccatiSchedule:
    """Solve the boundary-coupled Riccati pair for steering ``start`` to ``end``.

    The boundary condition is found by damped fixed-point iteration on
    ``Pi(0)``: propagate ``H`` forward from ``Sigma0^{-1} - Pi(0)``, close
    the terminal coupling ``Pi(tf) = Sigma1^{-1} - H(tf)``, propagate ``Pi``
    back to 0 and average with the previous guess. That iteration runs on
    exact (matrix-exponential) flow maps; a quasi-Newton correction then
    moves ``Pi(0)`` until the terminal coupling of the RK4 grid flow is met
    to ``tol`` in Frobenius norm.

    Raises
    ------
    UnsupportedConfiguration
        ``B`` and ``B1`` differ.
    NonConvergenceError
        Boundary iteration budget exhausted.
    DomainError
        Uncontrollable pair, or ``Pi + H`` loses definiteness on the path
        (the message carries the offending time).
    """
    n = sys.n
    if start.n != n or end.n != n:
        raise DomainError("state dimensions of system and marginals differ")
    if sys.B.shape != sys.B1.shape or not np.allclose(sys.B, sys.B1, rtol=1e-12, atol=1e-15):
        raise UnsupportedConfiguration(
            "only B == B1 is supported; distinct noise and control channels need a dynamically "
            "coupled Riccati system that is not implemented"
        )
    if controllability_rank(sys.A, sys.B) < n:
        raise DomainError("(A, B) is not controllable")
    if int(n_grid) < 1:
        raise DomainError("n_grid must be >= 1")

    times = np.linspace(0.0, sys.t_final, int(n_grid) + 1)
    S0 = np.linalg.inv(start.covariance)
    S1 = np.linalg.inv(end.covariance)
    f_pi, f_h = _riccati_rhs(sys.A, sys.B @ sys.B.T)

    # exact terminal maps first (cheap), then the same iteration on the RK4 grid
    BBt = sys.B @ sys.B.T
    pi_fwd = _RiccatiMap(sys.A, BBt, +1, sys.t_final)
    h_fwd = _RiccatiMap(sys.A, BBt, -1, sys.t_final)
    pi_back = _RiccatiMap(sys.A, BBt, +1, -sys.t_final)

    def exact_terminal(P0):
        return pi_fwd(P0) + h_fwd(S0 - P0) - S1

    def exact_update(P0):
        return pi_back(S1 - h_fwd(S0 - P0))

    def grid_terminal(P0):
        Pi_T = rk4_matrix_flow(f_pi, P0, times)[-1]
        H_T = rk4_matrix_flow(f_h, S0 - P0, times)[-1]
        return Pi_T + H_T - S1

    P0, history = _damped_boundary_iteration(
        lambda P: np.linalg.norm(exact_terminal(P)), exact_update,
        np.zeros((n, n)), min(tol, 1e-12), max_iter, damping)
    P0, polish = _newton_polish(grid_terminal, exact_terminal, P0, tol)
    history += polish
    it = len(history)

    Pi = rk4_matrix_flow(f_pi, P0, times)
    H = rk4_matrix_flow(f_h, S0 - P0, times)
    for k, t in enumerate(times):
        if np.linalg.eigvalsh(Pi[k] + H[k]).min() <= 0:
            raise DomainError(f"Pi + H lost positive definiteness at t={t:.6g}")
    mean, ff = _mean_transfer(sys, start, end, times)
    schedule = RiccatiSchedule(
        times=times, Pi=Pi, H=H, Sigma=np.empty_like(Pi), B=sys.B, mean=mean, feedforward=ff,
        iterations=it,
        boundary_residuals=(float(np.linalg.norm(Pi[0] + H[0] - S0)),
                            float(np.linalg.norm(Pi[-1] + H[-1] - S1))),
        history=history,
    )
    schedule.Sigma = covariance_path(schedule, sys, start)
    log.debug("Riccati boundary iteration converged in %d steps", it)
    return schedule


def covariance_path(schedule: RiccatiSchedule, sys: LinearSystem, start: GaussianState) -> np.ndarray:
    """Closed-loop covariance on the schedule grid.

    Integrates ``dSigma = (A - B B^T Pi) Sigma + Sigma (.)^T + B1 B1^T``
    jointly with ``Pi`` (so RK4 stages see consistent intermediate gains),
    restarting ``Pi`` from the schedule at each knot.
    """
    A, B, B1 = sys.A, sys.B, sys.B1
    BBt = B @ B.T
    Q = B1 @ B1.T
    f_pi, _ = _riccati_rhs(A, BBt)
    times = schedule.times

    def f(t, X):
        P, S = X
        F = A - BBt @ P
        return np.stack([f_pi(t, P), F @ S + S @ F.T + Q])

    Sigma = np.empty_like(schedule.Pi)
    Sigma[0] = start.covariance
    for k in range(len(times) - 1):
        pair = rk4_matrix_flow(f, np.stack([schedule.Pi[k], Sigma[k]]), times[k:k + 2])
        Sigma[k + 1] = pair[-1][1]
        if np.linalg.eigvalsh(Sigma[k + 1]).min() <= 0:
            raise DomainError(f"closed-loop covariance lost definiteness at t={times[k + 1]:.6g}")
    return Sigma


def control_energy(schedule: RiccatiSchedule, sigma_path=None) -> float:
    """Expected control energy ``E int |u|^2 dt`` by the trapezoidal rule."""
    S = schedule.Sigma if sigma_path is None else np.asarray(sigma_path, dtype=float)
    if S.shape != schedule.Pi.shape:
        raise DomainError(f"covariance path shape {S.shape} does not match schedule {schedule.Pi.shape}")
    K = schedule.gains
    power = np.einsum("kmi,kij,kmj->k", K, S, K) + np.sum(schedule.feedforward ** 2, axis=1)
    return max(float(trapezoid(power, schedule.times)), 0.0)
