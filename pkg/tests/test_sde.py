import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfpe import rng, sde
from sfpe.errors import InvalidArgumentError


def test_brownian_paths_are_increments_and_jacobian_is_identity():
    c = sde.brownian(2)
    grid = sde.TimeGrid.uniform(0.0, 1.0, 20)
    p = sde.simulate_paths(c, 0.0, np.zeros(2), grid, 50, base_seed=3, stream=1)
    np.testing.assert_allclose(p.X[:, 1:], np.cumsum(p.dW, axis=1), rtol=0, atol=1e-14)
    assert np.all(p.J == np.eye(2))
    assert np.all(p.X[:, 0] == 0)


def test_increments_come_from_counter_streams():
    grid = sde.TimeGrid.uniform(0.0, 1.0, 4)
    p = sde.simulate_paths(sde.brownian(1), 0.0, [0.0], grid, 10, base_seed=5, stream=9)
    expected = math.sqrt(0.25) * rng.step_normals(5, 9, 2, 10, 1)
    assert np.array_equal(p.dW[:, 2], expected)
    assert p.seed_tag == (5, 9)


def test_ou_mean_matches_exact_solution():
    # Euler bias with 200 steps is (1 - 1/200)^200 - e^{-1} ~ -9e-4, about 0.45 SE
    c = sde.ornstein_uhlenbeck(1)
    grid = sde.TimeGrid.uniform(0.0, 1.0, 200)
    p = sde.simulate_paths(c, 0.0, [1.0], grid, 100_000, base_seed=11)
    xt = p.X[:, -1, 0]
    se = xt.std(ddof=1) / math.sqrt(xt.size)
    assert abs(xt.mean() - math.exp(-1)) <= 3 * se


def test_ou_jacobian_is_deterministic_exponential():
    c = sde.ornstein_uhlenbeck(1)
    n = 1000
    grid = sde.TimeGrid.uniform(0.0, 1.0, n)
    p = sde.simulate_paths(c, 0.0, [0.3], grid, 4)
    J = p.J[:, :, 0, 0]
    assert np.all(J == J[0])
    exact = np.exp(-grid.nodes)
    # Euler for J' = -J: relative error at most s / (2n) to first order
    assert np.all(np.abs(J[0] - exact) <= exact * grid.nodes / n + 1e-15)


def test_determinism_and_prefix_property():
    c = sde.double_well(2)
    grid = sde.TimeGrid.uniform(0.0, 0.5, 10)
    a = sde.simulate_paths(c, 0.0, [0.1, -0.2], grid, 40, base_seed=1, stream=2)
    b = sde.simulate_paths(c, 0.0, [0.1, -0.2], grid, 40, base_seed=1, stream=2)
    small = sde.simulate_paths(c, 0.0, [0.1, -0.2], grid, 7, base_seed=1, stream=2)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.J, b.J)
    assert np.array_equal(a.X[:7], small.X)
    other = sde.simulate_paths(c, 0.0, [0.1, -0.2], grid, 40, base_seed=1, stream=3)
    assert not np.array_equal(a.dW, other.dW)


def test_increment_variance_matches_step_length():
    grid = sde.TimeGrid.graded_terminal(0.0, 1.0, 12)
    p = sde.simulate_paths(sde.brownian(1), 0.0, [0.0], grid, 20_000, base_seed=2)
    sq = p.dW[:, :, 0] ** 2
    var = sq.mean(axis=0)
    se = sq.std(axis=0, ddof=1) / math.sqrt(sq.shape[0])
    assert np.all(np.abs(var - grid.steps) <= 5 * se)


def test_divergence_is_flagged_and_frozen():
    # mu = 50 x explodes on a coarse grid
    c = sde.linear([[50.0]], c_mono=100.0)
    grid = sde.TimeGrid.uniform(0.0, 1.0, 10)
    p = sde.simulate_paths(c, 0.0, [1.0], grid, 20, domain=(-1e3, 1e3))
    assert np.all(p.diverged_at > 0)
    k = p.diverged_at[0]
    assert p.X[0, k, 0] == 1.0


def test_tamed_drift_keeps_double_well_finite():
    c = sde.double_well(1, kappa=5.0)
    grid = sde.TimeGrid.uniform(0.0, 1.0, 20)
    untamed = sde.simulate_paths(c, 0.0, [6.0], grid, 200, tamed=False)
    tamed = sde.simulate_paths(c, 0.0, [6.0], grid, 200, tamed=True)
    assert np.any(untamed.diverged_at >= 0)
    assert np.all(tamed.ok)


def test_tamed_drift_jacobian_matches_finite_differences():
    c = sde.double_well(2, kappa=1.5)
    g = np.random.default_rng(0)
    x = g.normal(size=(5, 2)) * 2
    dt, h = 0.1, 1e-6
    mu, dmu = sde.tamed_drift(c.mu(0, x), c.dmu_dx(0, x), dt)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        up = sde.tamed_drift(c.mu(0, x + e), c.dmu_dx(0, x + e), dt)[0]
        dn = sde.tamed_drift(c.mu(0, x - e), c.dmu_dx(0, x - e), dt)[0]
        np.testing.assert_allclose((up - dn) / (2 * h), dmu[:, :, i], rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("coeffs", [
    sde.brownian(2), sde.ornstein_uhlenbeck(3, theta=0.7), sde.double_well(2, kappa=0.5),
    sde.geometric(2, vol=0.3, drift=0.05, box_lo=0.5, box_hi=2.0),
    sde.linear([[0.2, 1.0], [-1.0, 0.1]], S=[[1.0, 0.3], [0.0, 0.8]]),
])
def test_builtin_jacobians_match_central_differences(coeffs):
    x = np.random.default_rng(1).uniform(0.5, 2.0, (10, coeffs.d))
    err_mu, err_sig = sde.check_jacobians(coeffs, 0.3, x, h=1e-5)
    assert err_mu < 1e-7 and err_sig < 1e-7


def test_conditions_hold_for_ou():
    c = sde.ornstein_uhlenbeck(2)
    rep = sde.check_coefficient_conditions(c, sde.sample_cloud(2, -3, 3, 500))
    assert rep.monotonicity_ratio <= 0 < c.c_mono / 2
    assert rep.ellipticity_ratio == pytest.approx(1.0, rel=1e-12)
    assert rep.passed


def test_explosive_drift_fails_with_witness():
    c = sde.linear([[1.0]], c_mono=1.5)
    rep = sde.check_coefficient_conditions(c, sde.sample_cloud(1, -2, 2, 100))
    assert not rep.monotone_ok
    assert rep.monotonicity_ratio == pytest.approx(1.0)
    x, y = rep.monotone_witness
    assert x.shape == (1,) and x[0] != y[0]


def test_geometric_ellipticity_is_box_minimum():
    lo, hi = 0.5, 2.0
    c = sde.geometric(1, vol=0.2, box_lo=lo, box_hi=hi)
    cloud = sde.sample_cloud(1, lo, hi, 2000, seed=4)
    rep = sde.check_coefficient_conditions(c, cloud)
    brute = float(np.min((0.2 * cloud[1][:, 0]) ** 2))
    assert rep.ellipticity_ratio == pytest.approx(brute, rel=1e-12)
    assert rep.ellipticity_ratio >= c.alpha
    assert c.alpha == pytest.approx((0.2 * lo) ** 2)


def test_geometric_requires_box_away_from_zero():
    with pytest.raises(InvalidArgumentError):
        sde.geometric(1, box_lo=-1.0, box_hi=1.0)


def test_moment_report_brownian():
    c = sde.brownian(2)
    grid = sde.TimeGrid.uniform(0.0, 1.0, 10)
    p = sde.simulate_paths(c, 0.0, np.zeros(2), grid, 4000, base_seed=8)
    rep = sde.moment_bound_report_X_J(p, c)
    assert rep.all_passed
    np.testing.assert_allclose(rep.columns["emp_EJ2"], 2.0)
    # E|X_T|^2 = d T
    assert abs(rep.columns["emp_EX2"][-1] - 2.0) <= 3 * rep.columns["se_EX2"][-1]
    assert sde.origin_constant(c, grid.nodes) == 2.0


def test_moment_report_ou_jacobian():
    c = sde.ornstein_uhlenbeck(1)
    grid = sde.TimeGrid.uniform(0.0, 1.0, 100)
    p = sde.simulate_paths(c, 0.0, [0.5], grid, 1000)
    rep = sde.moment_bound_report_X_J(p, c)
    assert rep.all_passed
    assert np.all(rep.columns["emp_EJ2"] <= math.exp(2 * c.c_mono))


def test_moment_report_needs_enough_paths():
    c = sde.brownian(1)
    p = sde.simulate_paths(c, 0.0, [0.0], sde.TimeGrid.uniform(0, 1, 10), 10)
    with pytest.raises(InvalidArgumentError):
        sde.moment_bound_report_X_J(p, c)


def test_grid_start_must_match():
    with pytest.raises(InvalidArgumentError):
        sde.simulate_paths(sde.brownian(1), 0.5, [0.0], sde.TimeGrid.uniform(0, 1, 10), 10)


@settings(max_examples=40, deadline=None)
@given(t0=st.floats(0, 5), span=st.floats(1e-3, 10), n=st.integers(2, 400),
       frac=st.floats(0.01, 0.5))
def test_singular_start_grid_invariants(t0, span, n, frac):
    g = sde.TimeGrid.singular_start(t0, t0 + span, n, fraction=frac)
    assert g.nodes[0] == t0 and g.nodes[-1] == t0 + span
    assert np.all(np.diff(g.nodes) > 0)
    assert g.n_steps == n and 1 <= g.n_graded < n
    # graded head is uniform in sqrt(r - t0)
    u = np.sqrt(g.nodes[:g.n_graded + 1] - t0)
    np.testing.assert_allclose(np.diff(u), u[-1] / g.n_graded, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(t0=st.floats(-3, 3), span=st.floats(1e-2, 5), n=st.integers(1, 200))
def test_uniform_grid_invariants(t0, span, n):
    g = sde.TimeGrid.uniform(t0, t0 + span, n)
    assert g.t0 == t0 and g.T == t0 + span
    assert np.all(np.diff(g.nodes) > 0)
    assert g.index_of(g.nodes[n // 2]) == n // 2
