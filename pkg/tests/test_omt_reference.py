import math

import numpy as np
import pytest
from scipy.stats import kstest, norm

from oracles import gaussian_sb_variance
from sbridge.errors import DomainError, UnsupportedConfiguration
from sbridge.markov_prior import Grid1D
from sbridge.omt_reference import (
    DisplacementPath,
    Normal1D,
    Quantile1D,
    displacement_interpolation,
    hj_residual,
    midpoint_probs,
    monotone_map_1d,
    wasserstein2,
    write_study_csv,
    zero_noise_study,
)

U = midpoint_probs(1000)
N01, N04, N31 = Normal1D(0, 1), Normal1D(0, 2), Normal1D(3, 1)


def test_quantile_validation():
    with pytest.raises(DomainError):
        Quantile1D([0.2, 0.1], [0.0, 1.0])
    with pytest.raises(DomainError):
        Quantile1D([0.1, 0.2], [1.0, 0.0])
    with pytest.raises(DomainError):
        Quantile1D([0.0, 0.5], [0.0, 1.0])
    with pytest.raises(DomainError):
        Normal1D(0.0, 0.0)


def test_monotone_map_examples():
    x, T = monotone_map_1d(N01.quantiles(U), N04.quantiles(U))
    assert np.max(np.abs(T - 2 * x)) <= 1e-10
    x, T = monotone_map_1d(N01.quantiles(U), N31.quantiles(U))
    assert np.max(np.abs(T - (x + 3))) <= 1e-10
    x, T = monotone_map_1d(N01.quantiles(U), N01.quantiles(U))
    assert np.array_equal(x, T)
    assert np.all(np.diff(T) >= 0)


def test_monotone_map_grid_mismatch():
    with pytest.raises(DomainError):
        monotone_map_1d(N01.quantiles(U), N01.quantiles(midpoint_probs(10)))


def test_push_forward_ks():
    rng = np.random.default_rng(0)
    x, T = monotone_map_1d(N01.quantiles(U), Normal1D(1, 0.5).quantiles(U))
    samples = np.interp(rng.normal(size=100_000), x, T)
    inside = np.abs(samples - 1) < 0.5 * norm.ppf(U[-1])
    assert kstest(samples[inside], norm(1, 0.5).cdf).statistic <= 0.01


def test_displacement_examples():
    assert displacement_interpolation(N01, N04, 0.0) == N01
    assert displacement_interpolation(N01, N04, 1.0) == N04
    mid = displacement_interpolation(N01, N04, 0.5)
    assert mid.variance == pytest.approx(2.25, abs=1e-15)
    mid = displacement_interpolation(Normal1D(-1, 1), Normal1D(1, 1), 0.5)
    assert mid.mean == 0.0 and mid.std == 1.0
    q = displacement_interpolation(N01.quantiles(U), N04.quantiles(U), 0.5)
    assert np.allclose(q.values, 1.5 * N01.quantiles(U).values, atol=1e-14)
    with pytest.raises(DomainError):
        displacement_interpolation(N01, N04, 1.5)
    with pytest.raises(DomainError):
        displacement_interpolation(N01, N04.quantiles(U), 0.5)


def test_wasserstein_examples():
    assert wasserstein2(N01, N01) == 0.0
    assert abs(wasserstein2(N01, N31) - 3.0) <= 1e-12
    assert abs(wasserstein2(N01, N04) - 1.0) <= 1e-12
    assert abs(wasserstein2(Normal1D(1, 2), Normal1D(-2, 6)) - 5.0) <= 1e-12
    assert wasserstein2(N01.quantiles(U), N31.quantiles(U)) == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(DomainError):
        wasserstein2(N01, N01.quantiles(U))


def test_constant_speed_geodesic():
    a, b = Normal1D(-1, 0.7), Normal1D(2.5, 0.7)
    for t in np.linspace(0, 1, 7):
        mid = displacement_interpolation(a, b, t)
        assert abs(wasserstein2(mid, a) - t * wasserstein2(a, b)) <= 1e-10
    qa, qb = a.quantiles(U), b.quantiles(U)
    for t in np.linspace(0, 1, 7):
        assert abs(wasserstein2(displacement_interpolation(qa, qb, t), qa) - t * wasserstein2(qa, qb)) <= 1e-10


def test_grid_quantiles_converge():
    g = Grid1D(-6, 6, 2000)
    p = norm.pdf(g.points, 0.5, 0.8)
    q = Quantile1D.from_grid(g.points, p / p.sum(), U)
    assert wasserstein2(q, Normal1D(0.5, 0.8).quantiles(U)) <= 1e-3


def test_path_endpoints_and_velocity():
    p = DisplacementPath(Normal1D(-1, 1), Normal1D(2, 3))
    assert p.at(0.0) == p.rho0 and p.at(1.0) == p.rho1
    # v transports quantiles: d/dt q_t(u) = v(q_t(u), t)
    t, dt = 0.3, 1e-6
    q = lambda s: p.at(s).quantiles(U).values
    dq = (q(t + dt) - q(t - dt)) / (2 * dt)
    assert np.max(np.abs(dq - p.velocity(q(t), t))) <= 1e-6


def test_hj_residual_examples():
    g = Grid1D(-5, 5, 201)
    times = np.linspace(0, 1, 11)
    still = hj_residual(DisplacementPath(N01, N01), g, times)
    assert still.hj == 0.0 and still.continuity <= 1e-12
    res = hj_residual(DisplacementPath(N01, N04), g, times)
    assert res.hj <= 1e-8
    bad = hj_residual(DisplacementPath(N01, N04, quad_offset=1e-2), g, times)
    assert bad.hj >= 1e-3


def test_continuity_residual_is_second_order():
    p = DisplacementPath(N01, N04)
    times = np.linspace(0.1, 0.9, 5)
    r1 = hj_residual(p, Grid1D(-5, 5, 101), times).continuity
    r2 = hj_residual(p, Grid1D(-5, 5, 201), times).continuity
    assert 3.0 <= r1 / r2 <= 5.0


def test_hj_rejects_quantile_paths():
    with pytest.raises(UnsupportedConfiguration):
        hj_residual(DisplacementPath(N01.quantiles(U), N04.quantiles(U)), Grid1D(-1, 1, 5), [0.5])


def test_study_validation():
    g = Grid1D(-4, 4, 100)
    with pytest.raises(DomainError):
        zero_noise_study(N01, N01, g, [0.1, 0.2])
    with pytest.raises(DomainError):
        zero_noise_study(N01, N01, g, [0.2], n_time_steps=3)
    with pytest.raises(DomainError, match="too narrow"):
        zero_noise_study(Normal1D(-1, 0.5), Normal1D(1, 0.5), Grid1D(-2, 2, 100), [0.5])


def test_study_identical_endpoints_matches_closed_form():
    # the entropic mid-marginal of a Brownian bridge between equal Gaussians is
    # wider than the marginal itself, so the distance is |sd_mid - sd|, not the floor
    g = Grid1D(-4, 4, 400)
    rows = zero_noise_study(Normal1D(0, 0.5), Normal1D(0, 0.5), g, [0.5, 0.1])
    for r in rows:
        sd_mid = math.sqrt(gaussian_sb_variance(0.25, 0.25, r.epsilon, 0.5))
        assert r.w2_mid == pytest.approx(sd_mid - 0.5, abs=5 * r.discretization_floor)
    assert rows[1].w2_mid < rows[0].w2_mid


def test_study_large_noise_is_far():
    g = Grid1D(-8, 8, 400)
    rows = zero_noise_study(Normal1D(-1, 0.5), Normal1D(1, 0.5), g, [4.0, 0.1])
    assert rows[0].w2_mid >= 2 * rows[1].w2_mid


def test_study_csv(tmp_path):
    rows = zero_noise_study(Normal1D(-1, 0.5), Normal1D(1, 0.5), Grid1D(-4, 4, 120), [0.5, 0.2])
    write_study_csv(tmp_path / "s.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "epsilon,W2_mid,bridge_cycles,contraction_ratio_bound,discretization_floor"
    assert len(lines) == 4
