"""Schrödinger bridges, covariance steering and their optimal-transport limit."""

__version__ = "0.1.0"

from .errors import (
    DomainError,
    InfeasibleError,
    NonConvergenceError,
    SBridgeError,
    SimulationError,
    UnsupportedConfiguration,
)
from .cone_metric import INFINITE, birkhoff_ratio, hilbert_distance, log_hilbert_distance, projective_diameter
from .markov_prior import Grid1D, TransitionKernel, build_heat_kernel, compose, discretize_gaussian, propagate
from .discrete_bridge import (
    BridgeSolution,
    DiscreteBridgeProblem,
    bridge_coupling,
    fortet_cycle,
    interpolate,
    relative_entropy,
    solve,
)
from .gaussian_bridge import (
    GaussianState,
    LinearSystem,
    RiccatiSchedule,
    control_energy,
    covariance_path,
    solve_gauss_bridge,
)
from .stationary_steering import (
    StationaryProblem,
    check_feasibility,
    closed_loop_covariance,
    optimal_stationary_gain,
    uncontrolled_covariance,
)
from .oscillator_cooling import OscillatorModel, cooling_plan, effective_temperatures, target_state
from .sde_lab import PathEnsemble, empirical_moments, simulate, tube_stats
from .omt_reference import (
    DisplacementPath,
    Normal1D,
    Quantile1D,
    displacement_interpolation,
    hj_residual,
    monotone_map_1d,
    wasserstein2,
    zero_noise_study,
)
