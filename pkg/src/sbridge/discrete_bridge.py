"""Discrete Schrödinger bridges by the four-map Fortet/Sinkhorn cycle.

One cycle maps the initial co-potential ``phihat0`` through::

    phihatT = prior.T @ phihat0        (forward propagation)
    phiT    = pT / phihatT             (componentwise)
    phi0    = prior @ phiT             (backward propagation)
    phihat0 = p0 / phi0                (componentwise)

The two propagations each contract the Hilbert metric by the Birkhoff
ratio of the prior, the two divisions are isometries, so the cycle is a
strict contraction whenever the prior is strictly positive.

Potentials are held as logarithms throughout. Priors whose entries fall
below ``exp(LOG_TINY)`` are iterated in log-space; otherwise the cycle runs
on plain matrix-vector products.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .cone_metric import log_hilbert_distance
from .errors import DomainError, InfeasibleError, NonConvergenceError
from .markov_prior import TransitionKernel, as_marginal, write_matrix_csv

__all__ = [
    "DiscreteBridgeProblem",
    "BridgeSolution",
    "CycleResult",
    "fortet_cycle",
    "solve",
    "bridge_coupling",
    "interpolate",
    "relative_entropy",
    "write_solution_csv",
]

log = logging.getLogger(__name__)

NEG_INF = -np.inf


def _log(v):
    with np.errstate(divide="ignore"):
        return np.log(v)


@dataclass(eq=False)
class DiscreteBridgeProblem:
    """Prior ``T``-step kernel plus endpoint marginals.

    If ``step_kernels`` is given without ``prior``, the prior is their
    composition. If both are given they must agree entrywise to 1e-10.
    """

    prior: TransitionKernel | None
    p0: np.ndarray
    pT: np.ndarray
    step_kernels: list[TransitionKernel] | None = None

    def __post_init__(self):
        from .markov_prior import compose

        if self.step_kernels is not None:
            self.step_kernels = list(self.step_kernels)
            if not self.step_kernels:
                raise DomainError("step_kernels must be nonempty when given")
            composed = compose(self.step_kernels)
            if self.prior is None:
                self.prior = composed
            elif np.max(np.abs(composed.matrix - self.prior.matrix)) > 1e-10:
                raise DomainError("step kernels do not compose to the prior (max deviation > 1e-10)")
        if self.prior is None:
            raise DomainError("a prior kernel or step kernels are required")
        n = self.prior.n_states
        self.p0 = as_marginal(self.p0, n)
        self.pT = as_marginal(self.pT, n)
        self._check_support()

    @property
    def n_states(self) -> int:
        return self.prior.n_states

    def _check_support(self):
        edges = np.isfinite(self.prior.log)
        s0 = self.p0 > 0
        sT = self.pT > 0
        reached = edges[s0].any(axis=0)
        if np.any(sT & ~reached):
            bad = np.flatnonzero(sT & ~reached)
            raise InfeasibleError(f"target mass at states {bad[:10].tolist()} is unreachable from supp(p0)")
        leaves = edges[:, sT].any(axis=1)
        if np.any(s0 & ~leaves):
            bad = np.flatnonzero(s0 & ~leaves)
            raise InfeasibleError(f"initial mass at states {bad[:10].tolist()} cannot reach supp(pT)")


@dataclass
class CycleResult:
    """Potentials produced by one cycle, stored as logarithms."""

    log_phihatT: np.ndarray
    log_phiT: np.ndarray
    log_phi0: np.ndarray
    log_phihat0: np.ndarray

    @property
    def phihat0(self):
        return np.exp(self.log_phihat0)

    @property
    def phihatT(self):
        return np.exp(self.log_phihatT)

    @property
    def phiT(self):
        return np.exp(self.log_phiT)

    @property
    def phi0(self):
        return np.exp(self.log_phi0)


@dataclass
class BridgeSolution:
    log_phi0: np.ndarray
    log_phiT: np.ndarray
    log_phihat0: np.ndarray
    log_phihatT: np.ndarray
    iterations: int
    convergence_log: list[tuple[int, float, float]] = field(default_factory=list)
    tol: float = 0.0
    log_domain: bool = False

    phi0 = property(lambda self: np.exp(self.log_phi0))
    phiT = property(lambda self: np.exp(self.log_phiT))
    phihat0 = property(lambda self: np.exp(self.log_phihat0))
    phihatT = property(lambda self: np.exp(self.log_phihatT))

    def marginal_residuals(self, problem: DiscreteBridgeProblem) -> tuple[float, float]:
        """Max-abs residuals of ``phi0*phihat0 = p0`` and ``phiT*phihatT = pT``."""
        r0 = np.max(np.abs(np.exp(self.log_phi0 + self.log_phihat0) - problem.p0))
        rT = np.max(np.abs(np.exp(self.log_phiT + self.log_phihatT) - problem.pT))
        return float(r0), float(rT)

    def contraction_factors(self, floor: float = 0.0) -> np.ndarray:
        """Ratios ``d_{k+1} / d_k`` of successive Hilbert changes with ``d_k > floor``."""
        d = np.array([row[1] for row in self.convergence_log])
        if d.size < 2:
            return np.empty(0)
        prev, nxt = d[:-1], d[1:]
        keep = prev > floor
        return nxt[keep] / prev[keep]


def _divide(log_num, log_den, support, what):
    """``num / den`` on ``support``, zero elsewhere; flags zero denominators."""
    dead = support & ~np.isfinite(log_den)
    if np.any(dead):
        raise InfeasibleError(
            f"{what}: zero denominator at states {np.flatnonzero(dead)[:10].tolist()} "
            "carrying positive mass (unreachable mass)"
        )
    out = np.full(log_num.shape, NEG_INF)
    out[support] = log_num[support] - log_den[support]
    return out


class _Propagator:
    """Forward/backward products with the prior in linear or log arithmetic."""

    def __init__(self, kernel: TransitionKernel, log_domain: bool):
        self.log_domain = log_domain
        if log_domain:
            self.L = np.asarray(kernel.log)
        else:
            self.P = kernel.matrix

    def forward(self, lv):
        # prior.T @ v
        if self.log_domain:
            with np.errstate(invalid="ignore"):
                return logsumexp(self.L + lv[:, None], axis=0)
        shift = np.max(lv[np.isfinite(lv)])
        return _log(self.P.T @ np.exp(lv - shift)) + shift

    def backward(self, lv):
        # prior @ v
        if self.log_domain:
            with np.errstate(invalid="ignore"):
                return logsumexp(self.L + lv[None, :], axis=1)
        shift = np.max(lv[np.isfinite(lv)])
        return _log(self.P @ np.exp(lv - shift)) + shift


def _cycle(log_phihat0, prop, lp0, lpT, s0, sT):
    lhT = prop.forward(log_phihat0)
    lfT = _divide(lpT, lhT, sT, "phiT = pT / phihatT")
    lf0 = prop.backward(lfT)
    lh0 = _divide(lp0, lf0, s0, "phihat0 = p0 / phi0")
    return CycleResult(lhT, lfT, lf0, lh0)


def fortet_cycle(phihat0, problem: DiscreteBridgeProblem, *, log_input: bool = False) -> CycleResult:
    """Apply the four maps once to ``phihat0`` (linear, or logarithms if ``log_input``)."""
    lh = np.asarray(phihat0, dtype=float)
    if lh.shape != (problem.n_states,):
        raise DomainError(f"phihat0 has shape {lh.shape}, expected ({problem.n_states},)")
    if not log_input:
        if np.any(lh < 0):
            raise DomainError("phihat0 must be nonnegative")
        lh = _log(lh)
    if not np.any(np.isfinite(lh[problem.p0 > 0])):
        raise DomainError("phihat0 vanishes on supp(p0)")
    prop = _Propagator(problem.prior, problem.prior.needs_log)
    return _cycle(lh, prop, _log(problem.p0), _log(problem.pT), problem.p0 > 0, problem.pT > 0)


def _gauge(lv):
    return lv - logsumexp(lv[np.isfinite(lv)])


def solve(
    problem: DiscreteBridgeProblem,
    tol: float = 1e-12,
    max_cycles: int = 100_000,
    init=None,
) -> BridgeSolution:
    """Iterate the Fortet cycle until successive ``phihat0`` are within ``tol`` in Hilbert distance.

    Parameters
    ----------
    problem : DiscreteBridgeProblem
    tol : float
        Stopping threshold on the projective change of ``phihat0``.
    max_cycles : int
        Cycle budget; exhausting it raises :class:`NonConvergenceError`.
    init : array_like, optional
        Starting ``phihat0``; defaults to ``p0``.

    Returns
    -------
    BridgeSolution
        Potentials gauge-fixed so that ``phihat0`` sums to one.
        ``convergence_log`` holds ``(cycle, hilbert_change, pT_residual)``.
    """
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    log_domain = problem.prior.needs_log
    prop = _Propagator(problem.prior, log_domain)
    s0, sT = problem.p0 > 0, problem.pT > 0
    lp0, lpT = _log(problem.p0), _log(problem.pT)

    lh = _log(problem.p0 if init is None else np.asarray(init, dtype=float))
    lh[~s0] = NEG_INF
    if not np.all(np.isfinite(lh[s0])):
        raise DomainError("initial phihat0 must be positive on supp(p0)")

    history: list[tuple[int, float, float]] = []
    step = _cycle(lh, prop, lp0, lpT, s0, sT)
    change = np.inf
    for k in range(1, max_cycles + 1):
        change = log_hilbert_distance(step.log_phihat0, lh)
        lh = step.log_phihat0
        nxt = _cycle(lh, prop, lp0, lpT, s0, sT)
        # nxt.log_phihatT is prior.T @ (current phihat0); pairing it with the
        # current phiT gives the terminal marginal mismatch of this iterate
        resid = float(np.max(np.abs(np.exp(step.log_phiT + nxt.log_phihatT) - problem.pT)))
        history.append((k, change, resid))
        if change < tol:
            break
        step = nxt
    else:
        raise NonConvergenceError(
            f"Fortet iteration did not reach tol={tol:g} in {max_cycles} cycles "
            f"(last Hilbert change {change:.3e})",
            last_change=change,
            log=history,
        )

    lh0 = _gauge(lh)
    lhT = prop.forward(lh0)
    lfT = _divide(lpT, lhT, sT, "phiT = pT / phihatT")
    lf0 = prop.backward(lfT)
    log.debug("bridge converged in %d cycles (log_domain=%s)", k, log_domain)
    return BridgeSolution(lf0, lfT, lh0, lhT, k, history, tol, log_domain)


def bridge_coupling(sol: BridgeSolution, problem: DiscreteBridgeProblem) -> np.ndarray:
    """Joint law ``q_ij = phihat0_i * prior_ij * phiT_j`` of the bridge endpoints."""
    if not isinstance(sol, BridgeSolution):
        raise DomainError("bridge_coupling needs a solved BridgeSolution")
    with np.errstate(invalid="ignore"):
        lq = sol.log_phihat0[:, None] + problem.prior.log + sol.log_phiT[None, :]
    lq[np.isnan(lq)] = NEG_INF
    return np.exp(lq)


def interpolate(sol: BridgeSolution, problem: DiscreteBridgeProblem) -> list[np.ndarray]:
    """One-time marginals of the bridge at every step boundary ``t_0 .. t_N``.

    ``phihat`` is pushed forward through the step kernels from ``t_0`` and
    ``phi`` pulled back from ``t_N``; their normalised product is the
    marginal at each knot.
    """
    if not problem.step_kernels:
        raise DomainError("interpolate needs a problem built with step_kernels")
    kernels = problem.step_kernels
    logs = [np.asarray(K.log) for K in kernels]
    n_steps = len(kernels)

    forward = [sol.log_phihat0]
    for L in logs:
        with np.errstate(invalid="ignore"):
            forward.append(logsumexp(L + forward[-1][:, None], axis=0))
    backward = [sol.log_phiT]
    for L in reversed(logs):
        with np.errstate(invalid="ignore"):
            backward.append(logsumexp(L + backward[-1][None, :], axis=1))
    backward.reverse()

    marginals = []
    for k in range(n_steps + 1):
        with np.errstate(invalid="ignore"):
            lr = forward[k] + backward[k]
        lr[np.isnan(lr)] = NEG_INF
        marginals.append(np.exp(lr - logsumexp(lr)))
    return marginals


def relative_entropy(sol: BridgeSolution, problem: DiscreteBridgeProblem) -> float:
    """``sum q_ij log(q_ij / (p0_i prior_ij))`` over the support of ``q``."""
    q = bridge_coupling(sol, problem)
    Lpi = problem.prior.log
    mask = q > 0
    if np.any(mask & ~np.isfinite(Lpi)):
        raise DomainError("coupling charges transitions the prior forbids")
    lp0 = _log(problem.p0)
    if np.any(mask & ~np.isfinite(lp0)[:, None]):
        raise DomainError("coupling charges states outside supp(p0)")
    # log(q / (p0 * prior)) = log phihat0_i - log p0_i + log phiT_j
    ratio = (sol.log_phihat0 - lp0)[:, None] + sol.log_phiT[None, :]
    return max(float(np.sum(q[mask] * ratio[mask])), 0.0)


def write_solution_csv(directory, sol: BridgeSolution, problem: DiscreteBridgeProblem, marginals=None):
    """Export potentials, coupling, convergence log and (optionally) interpolation marginals."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "potentials.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "phi0", "phihat0", "phiT", "phihatT",
                    "log_phi0", "log_phihat0", "log_phiT", "log_phihatT"])
        for i in range(problem.n_states):
            logs = [sol.log_phi0[i], sol.log_phihat0[i], sol.log_phiT[i], sol.log_phihatT[i]]
            w.writerow([i] + [repr(float(np.exp(v))) for v in logs] + [repr(float(v)) for v in logs])
    write_matrix_csv(d / "coupling.csv", bridge_coupling(sol, problem))
    with open(d / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "dH", "residual"])
        for k, dh, r in sol.convergence_log:
            w.writerow([k, repr(float(dh)), repr(float(r))])
    if marginals is not None:
        with open(d / "interpolation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + list(range(problem.n_states)))
            for k, m in enumerate(marginals):
                w.writerow([k] + [repr(float(v)) for v in m])
