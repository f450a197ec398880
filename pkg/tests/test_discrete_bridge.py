import math

import numpy as np
import pytest

from oracles import gaussian_sb_variance
from sbridge.cone_metric import birkhoff_ratio, hilbert_distance, log_hilbert_distance
from sbridge.discrete_bridge import (
    DiscreteBridgeProblem,
    bridge_coupling,
    fortet_cycle,
    interpolate,
    relative_entropy,
    solve,
    write_solution_csv,
)
from sbridge.errors import DomainError, InfeasibleError, NonConvergenceError
from sbridge.markov_prior import Grid1D, TransitionKernel, build_heat_kernel, discretize_gaussian, propagate

UNIFORM2 = TransitionKernel([[0.5, 0.5], [0.5, 0.5]])


def random_problem(rng, n, spread=1.0):
    P = np.exp(spread * rng.normal(size=(n, n)))
    P /= P.sum(axis=1, keepdims=True)
    return DiscreteBridgeProblem(TransitionKernel(P), rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n)))


def test_cycle_hand_example():
    prob = DiscreteBridgeProblem(UNIFORM2, [0.5, 0.5], [0.3, 0.7])
    c = fortet_cycle([1.0, 1.0], prob)
    assert np.allclose(c.phihatT, [1, 1])
    assert np.allclose(c.phiT, [0.3, 0.7])
    assert np.allclose(c.phi0, [0.5, 0.5])
    assert hilbert_distance(c.phihat0, [0.5, 0.5]) <= 1e-15
    c2 = fortet_cycle(c.phihat0, prob)
    assert hilbert_distance(c2.phihat0, c.phihat0) <= 1e-15


def test_cycle_prior_consistent_fixed_point():
    rng = np.random.default_rng(0)
    prob = random_problem(rng, 8)
    pT = propagate(prob.p0, prob.prior)
    prob = DiscreteBridgeProblem(prob.prior, prob.p0, pT)
    c = fortet_cycle(prob.p0, prob)
    assert hilbert_distance(c.phihat0, prob.p0) <= 1e-12


def test_cycle_projective_invariance():
    rng = np.random.default_rng(1)
    prob = random_problem(rng, 6)
    h = rng.uniform(0.1, 1, 6)
    a, b = fortet_cycle(h, prob), fortet_cycle(37.5 * h, prob)
    assert hilbert_distance(a.phihat0, b.phihat0) <= 1e-13


def test_solve_hand_example():
    prob = DiscreteBridgeProblem(UNIFORM2, [0.5, 0.5], [0.3, 0.7])
    sol = solve(prob)
    q = bridge_coupling(sol, prob)
    assert np.allclose(q, np.outer([0.5, 0.5], [0.3, 0.7]), atol=1e-14)
    assert abs(sol.phihat0.sum() - 1) <= 1e-15
    kl = 0.3 * math.log(0.6) + 0.7 * math.log(1.4)
    assert relative_entropy(sol, prob) == pytest.approx(kl, abs=1e-12)
    assert kl == pytest.approx(0.082282, abs=1e-6)


def test_symmetric_prior_is_its_own_bridge():
    pi = TransitionKernel([[0.9, 0.1], [0.1, 0.9]])
    prob = DiscreteBridgeProblem(pi, [0.5, 0.5], [0.5, 0.5])
    sol = solve(prob)
    assert np.allclose(bridge_coupling(sol, prob), 0.5 * pi.matrix, atol=1e-14)
    assert relative_entropy(sol, prob) <= 1e-10


def test_prior_consistent_marginals():
    rng = np.random.default_rng(2)
    base = random_problem(rng, 12)
    prob = DiscreteBridgeProblem(base.prior, base.p0, propagate(base.p0, base.prior))
    sol = solve(prob, tol=1e-12)
    assert sol.iterations <= 2
    assert log_hilbert_distance(sol.log_phiT, np.zeros(12)) <= 1e-12
    q = bridge_coupling(sol, prob)
    assert np.max(np.abs(q - prob.p0[:, None] * prob.prior.matrix)) <= 1e-10
    assert relative_entropy(sol, prob) <= 1e-10


def test_solution_invariants():
    rng = np.random.default_rng(3)
    for n in (3, 17, 60):
        prob = random_problem(rng, n)
        sol = solve(prob, tol=1e-12)
        r0, rT = sol.marginal_residuals(prob)
        assert max(r0, rT) <= 1e-11
        q = bridge_coupling(sol, prob)
        assert np.max(np.abs(q.sum(axis=1) - prob.p0)) <= 1e-11
        assert np.max(np.abs(q.sum(axis=0) - prob.pT)) <= 1e-11
        # phi0 = pi phiT and phihatT = pi^T phihat0
        assert np.allclose(sol.phi0, prob.prior.matrix @ sol.phiT, rtol=1e-12)
        assert np.allclose(sol.phihatT, prob.prior.matrix.T @ sol.phihat0, rtol=1e-12)


def test_contraction_bound_additive_form():
    rng = np.random.default_rng(4)
    for _ in range(20):
        prob = random_problem(rng, int(rng.integers(2, 40)), spread=1.5)
        lam = birkhoff_ratio(prob.prior.matrix)
        d = np.array([row[1] for row in solve(prob, tol=1e-13).convergence_log])
        assert np.all(d[1:] <= lam ** 2 * d[:-1] + 1e-9)


def test_gauge_invariance_across_initialisations():
    rng = np.random.default_rng(5)
    prob = random_problem(rng, 25)
    a = solve(prob, tol=1e-13)
    b = solve(prob, tol=1e-13, init=rng.uniform(0.01, 5, 25))
    for name in ("phi0", "phiT", "phihat0", "phihatT"):
        assert np.allclose(getattr(a, name), getattr(b, name), rtol=1e-8, atol=0)


def test_zero_marginal_entries_and_support():
    P = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.3, 0.0, 0.7]])
    prob = DiscreteBridgeProblem(TransitionKernel(P), [1.0, 0.0, 0.0], [0.4, 0.6, 0.0])
    sol = solve(prob)
    q = bridge_coupling(sol, prob)
    assert np.all(q[1:] == 0.0)
    assert np.all(q[P == 0] == 0.0)
    assert np.allclose(q[0], [0.4, 0.6, 0.0], atol=1e-14)


def test_unreachable_mass_is_infeasible():
    P = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(InfeasibleError):
        DiscreteBridgeProblem(TransitionKernel(P), [1.0, 0.0], [0.5, 0.5])


def test_non_convergence_report():
    rng = np.random.default_rng(6)
    prob = random_problem(rng, 30, spread=3.0)
    with pytest.raises(NonConvergenceError) as info:
        solve(prob, tol=1e-14, max_cycles=2)
    assert info.value.last_change > 0
    assert len(info.value.log) == 2


def test_bad_tol():
    with pytest.raises(DomainError):
        solve(DiscreteBridgeProblem(UNIFORM2, [0.5, 0.5], [0.5, 0.5]), tol=0.0)


def test_step_kernels_must_compose_to_prior():
    K = TransitionKernel([[0.9, 0.1], [0.2, 0.8]])
    with pytest.raises(DomainError):
        DiscreteBridgeProblem(K, [0.5, 0.5], [0.5, 0.5], step_kernels=[K, K])


def test_interpolate_single_step_returns_endpoints():
    rng = np.random.default_rng(7)
    base = random_problem(rng, 10)
    prob = DiscreteBridgeProblem(None, base.p0, base.pT, step_kernels=[base.prior])
    sol = solve(prob)
    marg = interpolate(sol, prob)
    assert len(marg) == 2
    assert np.max(np.abs(marg[0] - prob.p0)) <= 1e-11
    assert np.max(np.abs(marg[1] - prob.pT)) <= 1e-11


def test_interpolate_prior_consistent_follows_prior_flow():
    g = Grid1D(-3, 3, 60)
    steps = [build_heat_kernel(g, 0.4, 0.25)] * 4
    p0 = discretize_gaussian(g, -0.5, 0.3)
    flow = [p0]
    for K in steps:
        flow.append(propagate(flow[-1], K))
    prob = DiscreteBridgeProblem(None, p0, flow[-1], step_kernels=steps)
    marg = interpolate(solve(prob, tol=1e-12), prob)
    for a, b in zip(marg, flow):
        assert np.max(np.abs(a - b)) <= 1e-11


def test_interpolate_mirror_symmetry():
    g = Grid1D(-4, 4, 200)
    steps = [build_heat_kernel(g, 0.2, 1 / 8)] * 8
    prob = DiscreteBridgeProblem(None, discretize_gaussian(g, -1, 0.25), discretize_gaussian(g, 1, 0.25),
                                 step_kernels=steps)
    mid = interpolate(solve(prob, tol=1e-12), prob)[4]
    assert np.max(np.abs(mid - mid[::-1])) <= 1e-8


@pytest.mark.parametrize("eps", [0.5, 0.2, 0.1, 0.05])
def test_gaussian_bridge_marginals_match_closed_form(eps):
    g = Grid1D(-4, 4, 400)
    s = 0.25
    steps = [build_heat_kernel(g, eps, 1 / 8)] * 8
    prob = DiscreteBridgeProblem(None, discretize_gaussian(g, -1, s), discretize_gaussian(g, 1, s), step_kernels=steps)
    sol = solve(prob, tol=1e-11)
    assert sol.log_domain == prob.prior.needs_log
    x = g.points
    for k, m in enumerate(interpolate(sol, prob)):
        t = k / 8
        mean = float(m @ x)
        var = float(m @ (x - mean) ** 2)
        assert mean == pytest.approx(-1 + 2 * t, abs=1e-8)
        assert var == pytest.approx(gaussian_sb_variance(s, s, eps, t), abs=1e-6)


def test_relative_entropy_decreases_toward_prior_marginal():
    rng = np.random.default_rng(8)
    base = random_problem(rng, 15)
    consistent = propagate(base.p0, base.prior)
    values = []
    for a in np.linspace(0, 1, 5):
        pT = (1 - a) * base.pT + a * consistent
        prob = DiscreteBridgeProblem(base.prior, base.p0, pT / pT.sum())
        values.append(relative_entropy(solve(prob), prob))
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))
    assert values[-1] <= 1e-10


def test_csv_export(tmp_path):
    g = Grid1D(-2, 2, 20)
    steps = [build_heat_kernel(g, 0.5, 0.5)] * 2
    prob = DiscreteBridgeProblem(None, discretize_gaussian(g, -0.5, 0.2), discretize_gaussian(g, 0.5, 0.2),
                                 step_kernels=steps)
    sol = solve(prob)
    write_solution_csv(tmp_path, sol, prob, interpolate(sol, prob))
    lines = (tmp_path / "convergence.csv").read_text().splitlines()
    assert lines[0] == "cycle,dH,residual"
    assert len(lines) == sol.iterations + 1
    assert len((tmp_path / "interpolation.csv").read_text().splitlines()) == 4
    assert (tmp_path / "coupling.csv").exists() and (tmp_path / "potentials.csv").exists()
