"""Feedback cooling of a damped stochastic oscillator in a quadratic potential.

State ``(x, v)``::

    dx = v dt
    dv = -beta v dt - (kappa / m) x dt + u dt + sigma dW,   sigma^2 = 2 k beta T / m

A cooling plan steers the phase-space law to the Maxwell-Boltzmann density
at ``T_eff`` by time ``t1`` and then holds it there with a constant gain.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ._rows import rowwise_matvec
from .errors import DomainError, InfeasibleError
from .gaussian_bridge import (
    GaussianState,
    LinearSystem,
    RiccatiSchedule,
    control_energy,
    solve_gauss_bridge,
)
from .stationary_steering import (
    StationaryGain,
    StationaryProblem,
    check_feasibility,
    closed_loop_covariance,
    optimal_stationary_gain,
)

__all__ = [
    "OscillatorModel",
    "CoolingPlan",
    "oscillator_system",
    "target_state",
    "cooling_plan",
    "effective_temperatures",
]


@dataclass(frozen=True)
class OscillatorModel:
    """Physical constants; the noise level follows from them and is never stored."""

    m: float = 1.0
    beta: float = 1.0
    k: float = 1.0
    T: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if not (self.m > 0 and self.k > 0 and self.T > 0 and self.kappa > 0 and self.beta >= 0):
            raise DomainError(
                "need m, k, T, kappa > 0 and beta >= 0; got "
                f"m={self.m}, beta={self.beta}, k={self.k}, T={self.T}, kappa={self.kappa}"
            )

    @property
    def sigma(self) -> float:
        return math.sqrt(2.0 * self.k * self.beta * self.T / self.m)


def oscillator_system(model: OscillatorModel, t_final: float = 1.0) -> LinearSystem:
    """Linear system with physical force input ``B = (0, 1)^T`` and noise ``B1 = (0, sigma)^T``."""
    A = np.array([[0.0, 1.0], [-model.kappa / model.m, -model.beta]])
    return LinearSystem(A, np.array([[0.0], [1.0]]), np.array([[0.0], [model.sigma]]), t_final)


def target_state(model: OscillatorModel, T_eff: float) -> GaussianState:
    """Centred Gaussian ``∝ exp(-H(x, v) / (k T_eff))`` with ``H = m v^2/2 + kappa x^2/2``."""
    if not T_eff > 0:
        raise DomainError(f"T_eff must be positive, got {T_eff}")
    return GaussianState.centered(np.diag([model.k * T_eff / model.kappa, model.k * T_eff / model.m]))


def effective_temperatures(model: OscillatorModel, covariance) -> tuple[float, float]:
    """Temperatures read from position and velocity variances: ``kappa Var(x)/k`` and ``m Var(v)/k``."""
    C = np.asarray(covariance, dtype=float)
    return model.kappa * C[0, 0] / model.k, model.m * C[1, 1] / model.k


@dataclass
class CoolingPlan:
    model: OscillatorModel
    target: GaussianState
    t1: float
    steering: RiccatiSchedule
    steering_gain_scale: float
    maintenance: StationaryGain
    steering_energy: float

    def steering_gains(self) -> np.ndarray:
        """Physical force gains ``K(t_k)`` on the steering grid, shape ``(N+1, 1, 2)``."""
        return self.steering_gain_scale * self.steering.gains

    def force(self, t, x):
        """Physical feedback force at time ``t`` for states ``x`` of shape ``(p, 2)``."""
        x = np.asarray(x, dtype=float)
        if t < self.t1:
            return self.steering_gain_scale * self.steering.control(t, x)
        return -rowwise_matvec(x, self.maintenance.K)

    @property
    def terminal_covariance(self) -> np.ndarray:
        return self.steering.Sigma[-1]

    @property
    def maintained_covariance(self) -> np.ndarray:
        sys = oscillator_system(self.model)
        return closed_loop_covariance(sys.A, sys.B, sys.B1, self.maintenance.K)

    def to_dict(self) -> dict:
        K = self.steering_gains()
        return {
            "model": {"m": self.model.m, "beta": self.model.beta, "k": self.model.k,
                      "T": self.model.T, "kappa": self.model.kappa, "sigma": self.model.sigma},
            "target_covariance": self.target.covariance.tolist(),
            "phases": [
                {
                    "name": "steering",
                    "t_start": 0.0,
                    "t_end": self.t1,
                    "energy": self.steering_energy,
                    "terminal_covariance": self.terminal_covariance.tolist(),
                    "knots": [
                        {"t": float(t), "K": K[j].tolist()} for j, t in enumerate(self.steering.times)
                    ],
                },
                {
                    "name": "maintenance",
                    "t_start": self.t1,
                    "K": self.maintenance.K.tolist(),
                    "J_power": self.maintenance.power,
                    "stationary_covariance": self.maintained_covariance.tolist(),
                    "closed_loop_eigenvalues": [
                        [float(z.real), float(z.imag)] for z in self.maintenance.closed_loop_eigenvalues
                    ],
                },
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def cooling_plan(
    model: OscillatorModel,
    initial: GaussianState,
    T_eff: float,
    t1: float = 1.0,
    n_grid: int = 400,
    tol: float = 1e-9,
) -> CoolingPlan:
    """Steer ``initial`` to the ``T_eff`` Maxwell-Boltzmann law by ``t1``, then hold it.

    The steering problem is posed with the control entering through the
    noise channel ``(0, sigma)^T`` so the equal-channel Riccati solver
    applies; the solver's control ``u_s`` corresponds to the physical force
    ``sigma * u_s``.
    """
    if model.sigma == 0:
        raise DomainError("beta = 0 gives a noiseless oscillator; the equal-channel steering solver needs sigma > 0")
    target = target_state(model, T_eff)
    phys = oscillator_system(model, t1)

    report = check_feasibility(StationaryProblem(phys.A, phys.B, phys.B1, target.covariance))
    if not report.feasible:
        raise InfeasibleError(
            f"target at T_eff={T_eff} cannot be maintained (residual {report.residual:.3e})",
            report=report,
        )
    maintenance = optimal_stationary_gain(StationaryProblem(phys.A, phys.B, phys.B1, target.covariance))

    steer_sys = LinearSystem(phys.A, phys.B1, phys.B1, t1)
    schedule = solve_gauss_bridge(steer_sys, initial, target, n_grid=n_grid, tol=tol)
    scale = model.sigma
    energy = scale ** 2 * control_energy(schedule)
    return CoolingPlan(model, target, t1, schedule, scale, maintenance, energy)
