"""Closed-form one-dimensional optimal transport and the small-noise study.

Exact references: the monotone rearrangement ``F1^{-1} o F0``, displacement
interpolation of quantile functions and of Gaussians, quadratic
Wasserstein distances, and the quadratic potential / affine velocity field
of the Gaussian displacement path (checked against the Hamilton-Jacobi and
continuity equations).

``zero_noise_study`` solves grid Schrödinger bridges between two Gaussians
for a decreasing list of noise levels and measures how far the bridge's
mid-time marginal is from the displacement interpolant.

Reported W2 values are the usual (unsquared, no 1/2 factor) metric.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .cone_metric import birkhoff_ratio
from .discrete_bridge import DiscreteBridgeProblem, interpolate, solve
from .errors import DomainError, UnsupportedConfiguration
from .markov_prior import Grid1D, build_heat_kernel, discretize_gaussian

__all__ = [
    "Normal1D",
    "Quantile1D",
    "DisplacementPath",
    "midpoint_probs",
    "HJResidual",
    "StudyRow",
    "monotone_map_1d",
    "displacement_interpolation",
    "wasserstein2",
    "hj_residual",
    "check_grid_margin",
    "zero_noise_study",
    "write_study_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Normal1D:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DomainError(f"std must be positive, got {self.std}")

    @property
    def variance(self) -> float:
        return self.std ** 2

    def quantiles(self, probs) -> "Quantile1D":
        probs = np.asarray(probs, dtype=float)
        return Quantile1D(probs, self.mean + self.std * norm.ppf(probs))


def midpoint_probs(M: int) -> np.ndarray:
    return (np.arange(M) + 0.5) / M


@dataclass(frozen=True, eq=False)
class Quantile1D:
    probs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.probs, dtype=float)
        q = np.asarray(self.values, dtype=float)
        if u.ndim != 1 or u.shape != q.shape or u.size == 0:
            raise DomainError("probs and values must be 1-D arrays of equal length")
        if np.any(u <= 0) or np.any(u >= 1) or np.any(np.diff(u) <= 0):
            raise DomainError("probabilities must be strictly increasing inside (0, 1)")
        if np.any(np.diff(q) < 0):
            raise DomainError("quantile values must be nondecreasing")
        object.__setattr__(self, "probs", u)
        object.__setattr__(self, "values", q)

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights: widths of the probability cells around each node."""
        u = self.probs
        edges = np.concatenate([[0.0], 0.5 * (u[1:] + u[:-1]), [1.0]])
        return np.diff(edges)

    @classmethod
    def from_grid(cls, points, pmf, probs) -> "Quantile1D":
        """Quantiles of a grid pmf read as a piecewise-constant density on cells of width h."""
        x = np.asarray(points, dtype=float)
        p = np.asarray(pmf, dtype=float)
        h = x[1] - x[0]
        edges = np.concatenate([[x[0] - h / 2], x + h / 2])
        cdf = np.concatenate([[0.0], np.cumsum(p)])
        cdf /= cdf[-1]
        keep = np.concatenate([[True], np.diff(cdf) > 0])
        return cls(probs, np.interp(probs, cdf[keep], edges[keep]))


def _check_same_probs(a: Quantile1D, b: Quantile1D):
    if a.probs.shape != b.probs.shape or np.any(a.probs != b.probs):
        raise DomainError("quantile representations use different probability grids")


def monotone_map_1d(rho0: Quantile1D, rho1: Quantile1D) -> tuple[np.ndarray, np.ndarray]:
    """Optimal map ``T = F1^{-1} o F0`` sampled at ``rho0``'s quantiles.

    Returns ``(x, T(x))`` with ``x = rho0.values``.
    """
    _check_same_probs(rho0, rho1)
    for q in (rho0, rho1):
        if np.any(np.diff(q.values) < 0):
            raise DomainError("input quantiles are not monotone")
    return rho0.values.copy(), rho1.values.copy()


def displacement_interpolation(rho0, rho1, t: float):
    """McCann interpolant at time ``t`` for two ``Normal1D`` or two ``Quantile1D``."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    if isinstance(rho0, Normal1D) and isinstance(rho1, Normal1D):
        return Normal1D((1 - t) * rho0.mean + t * rho1.mean, (1 - t) * rho0.std + t * rho1.std)
    if isinstance(rho0, Quantile1D) and isinstance(rho1, Quantile1D):
        _check_same_probs(rho0, rho1)
        return Quantile1D(rho0.probs, (1 - t) * rho0.values + t * rho1.values)
    raise DomainError("both endpoints must be Normal1D or both Quantile1D")


def wasserstein2(a, b) -> float:
    """Quadratic Wasserstein distance (closed form for Gaussians, quadrature for quantiles)."""
    if isinstance(a, Normal1D) and isinstance(b, Normal1D):
        return math.hypot(a.mean - b.mean, a.std - b.std)
    if isinstance(a, Quantile1D) and isinstance(b, Quantile1D):
        _check_same_probs(a, b)
        return float(np.sqrt(np.sum(a.weights * np.square(a.values - b.values))))
    raise DomainError("wasserstein2 needs two Normal1D or two Quantile1D")


@dataclass(frozen=True)
class DisplacementPath:
    """Gaussian displacement path with affine velocity and quadratic potential.

    With ``s(t) = (1-t) s0 + t s1`` and ``beta = dmu * s0 - ds * mu0``::

        v(x, t)   = a(t) x + b(t),  a = ds / s(t),  b = beta / s(t)
        psi(x, t) = a(t) x^2 / 2 + b(t) x + c(t)

    ``quad_offset`` adds a constant to ``a`` in ``psi`` only; it exists to
    probe that the residual checks detect a wrong potential.
    """

    rho0: Normal1D | Quantile1D
    rho1: Normal1D | Quantile1D
    quad_offset: float = 0.0

    @property
    def is_gaussian(self) -> bool:
        return isinstance(self.rho0, Normal1D) and isinstance(self.rho1, Normal1D)

    def at(self, t):
        return displacement_interpolation(self.rho0, self.rho1, t)

    def _coeffs(self):
        if not self.is_gaussian:
            raise UnsupportedConfiguration("closed-form potential exists only for Gaussian endpoints")
        dm = self.rho1.mean - self.rho0.mean
        ds = self.rho1.std - self.rho0.std
        beta = dm * self.rho0.std - ds * self.rho0.mean
        return ds, beta

    def velocity_coefficients(self, t):
        ds, beta = self._coeffs()
        s = (1 - t) * self.rho0.std + t * self.rho1.std
        return ds / s, beta / s

    def velocity(self, x, t):
        a, b = self.velocity_coefficients(t)
        return a * np.asarray(x) + b

    def potential(self, x, t):
        ds, beta = self._coeffs()
        s0 = self.rho0.std
        s = (1 - t) * s0 + t * self.rho1.std
        a, b = ds / s + self.quad_offset, beta / s
        if ds == 0:
            c = -beta ** 2 * t / (2 * s0 ** 2)
        else:
            c = beta ** 2 / (2 * ds) * (1 / s - 1 / s0)
        x = np.asarray(x, dtype=float)
        return 0.5 * a * x ** 2 + b * x + c

    def density(self, x, t):
        g = self.at(t)
        return norm.pdf(x, g.mean, g.std)


@dataclass
class HJResidual:
    hj: float
    continuity: float


def hj_residual(path: DisplacementPath, grid: Grid1D, times, dt: float = 2e-4) -> HJResidual:
    """Max residuals of ``psi_t + psi_x^2 / 2 = 0`` and ``rho_t + (rho v)_x = 0``.

    ``psi_t`` uses a five-point central stencil in time on the closed-form
    potential, ``psi_x`` is exact. The continuity residual uses second-order
    central differences in both ``t`` and ``x`` (so it is O(h^2)).
    """
    if not path.is_gaussian:
        raise UnsupportedConfiguration("HJ residual is only defined for the smooth Gaussian path")
    x = grid.points
    h = grid.spacing
    hj = 0.0
    cont = 0.0
    for t in times:
        t = float(t)
        if not dt <= t <= 1 - dt:
            # keep the stencil inside [0, 1]
            t = min(max(t, 2 * dt), 1 - 2 * dt)
        psi = lambda tt: path.potential(x, tt)
        psi_t = (-psi(t + 2 * dt) + 8 * psi(t + dt) - 8 * psi(t - dt) + psi(t - 2 * dt)) / (12 * dt)
        ds, beta = path._coeffs()
        s = (1 - t) * path.rho0.std + t * path.rho1.std
        psi_x = (ds / s + path.quad_offset) * x + beta / s
        hj = max(hj, float(np.max(np.abs(psi_t + 0.5 * psi_x ** 2))))

        rho_t = (path.density(x, t + dt) - path.density(x, t - dt)) / (2 * dt)
        flux = path.density(x, t) * path.velocity(x, t)
        flux_x = np.gradient(flux, h, edge_order=2)
        cont = max(cont, float(np.max(np.abs(rho_t + flux_x)[1:-1])))
    return HJResidual(hj, cont)


@dataclass
class StudyRow:
    epsilon: float
    w2_mid: float
    bridge_cycles: int
    contraction_ratio_bound: float
    discretization_floor: float
    mid_marginal: np.ndarray = field(repr=False, default=None)
    convergence_log: list = field(repr=False, default_factory=list)


def check_grid_margin(grid: Grid1D, normals, eps_max: float, horizon: float = 1.0):
    """Require the grid to cover each ``mean ± 3 std`` plus ``1.5 sqrt(eps_max * horizon)``.

    The margin is three standard deviations of the bridge's mid-time
    fluctuation ``sqrt(eps T) / 2``.
    """
    margin = 1.5 * math.sqrt(eps_max * horizon)
    lo = min(r.mean - 3 * r.std for r in normals) - margin
    hi = max(r.mean + 3 * r.std for r in normals) + margin
    if grid.lower > lo or grid.upper < hi:
        raise DomainError(
            f"grid [{grid.lower}, {grid.upper}] too narrow for eps_max={eps_max}: need at least [{lo:.4g}, {hi:.4g}]"
        )


def zero_noise_study(
    rho0: Normal1D,
    rho1: Normal1D,
    grid: Grid1D,
    epsilons,
    n_time_steps: int = 8,
    tol: float = 1e-10,
    max_cycles: int = 200_000,
    n_quantiles: int = 4000,
) -> list[StudyRow]:
    """W2 between the entropic and displacement mid-time marginals for each noise level.

    ``n_time_steps`` must be even so that ``t = 1/2`` is a knot of the chain.
    """
    eps = [float(e) for e in epsilons]
    if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise DomainError("epsilons must be positive and strictly decreasing")
    if n_time_steps < 2 or n_time_steps % 2:
        raise DomainError("n_time_steps must be an even integer >= 2")
    check_grid_margin(grid, (rho0, rho1), eps[0])

    x = grid.points
    p0 = discretize_gaussian(grid, rho0.mean, rho0.variance)
    pT = discretize_gaussian(grid, rho1.mean, rho1.variance)
    probs = midpoint_probs(n_quantiles)
    floor = wasserstein2(Quantile1D.from_grid(x, p0, probs), rho0.quantiles(probs))
    target = displacement_interpolation(rho0, rho1, 0.5).quantiles(probs)

    rows = []
    for e in eps:
        step = build_heat_kernel(grid, e, 1.0 / n_time_steps)
        problem = DiscreteBridgeProblem(None, p0, pT, step_kernels=[step] * n_time_steps)
        sol = solve(problem, tol=tol, max_cycles=max_cycles)
        mid = interpolate(sol, problem)[n_time_steps // 2]
        w2 = wasserstein2(Quantile1D.from_grid(x, mid, probs), target)
        ratio = birkhoff_ratio(problem.prior.matrix)
        log.info("eps=%g W2_mid=%.6e cycles=%d", e, w2, sol.iterations)
        rows.append(StudyRow(e, w2, sol.iterations, ratio, floor, mid, sol.convergence_log))
    return rows


def write_study_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# W2 is the unsquared quadratic Wasserstein distance; cost |x-y|^2 without the 1/2 factor\n")
        w = csv.writer(fh)
        w.writerow(["epsilon", "W2_mid", "bridge_cycles", "contraction_ratio_bound", "discretization_floor"])
        for r in rows:
            w.writerow([repr(r.epsilon), repr(r.w2_mid), r.bridge_cycles,
                        repr(r.contraction_ratio_bound), repr(r.discretization_floor)])
