import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfpe import sde
from sfpe.bel import (SigmaSolver, accumulate_Y, bel_increment, y_second_moment_bound, z_at,
                      z_moment_report, z_second_moment_bound)
from sfpe.errors import IllConditionedSigmaError, InvalidArgumentError


def _paths(coeffs, x, T=1.0, n_steps=20, n=2000, seed=0, stream=0):
    grid = sde.TimeGrid.uniform(0.0, T, n_steps)
    p = sde.simulate_paths(coeffs, 0.0, np.asarray(x, dtype=float), grid, n, base_seed=seed, stream=stream)
    return accumulate_Y(p, coeffs)


def test_brownian_Y_is_the_brownian_increment_bitwise():
    p = _paths(sde.brownian(2), [0.0, 0.0], n=100)
    assert np.all(p.Y[:, 0] == 0)
    acc = np.zeros_like(p.Y[:, 0])
    for k in range(p.grid.n_steps):
        acc = acc + p.dW[:, k]
        assert np.array_equal(p.Y[:, k + 1], acc)


def test_scaled_sigma_halves_Y_pathwise():
    p1 = _paths(sde.brownian(1, scale=1.0), [0.0], n=200, seed=4)
    p2 = _paths(sde.brownian(1, scale=2.0), [0.0], n=200, seed=4)
    np.testing.assert_allclose(p2.Y, p1.Y / 2, rtol=1e-15, atol=0)
    z1 = z_at(p1, 0.0, 0.5).spatial
    z2 = z_at(p2, 0.0, 0.5).spatial
    np.testing.assert_allclose(z2, z1 / 2, rtol=1e-15)


def test_ou_Y_variance_is_ito_isometry():
    # Y_s = int_0^s e^{-r} dW_r for OU with unit noise; variance (1 - e^{-2s}) / 2
    c = sde.ornstein_uhlenbeck(1)
    p = _paths(c, [0.7], n_steps=100, n=100_000, seed=21)
    for s in (0.25, 0.5, 1.0):
        k = p.grid.index_of(s)
        y2 = p.Y[:, k, 0] ** 2
        se = y2.std(ddof=1) / math.sqrt(y2.size)
        # Euler J = (1 - dt)^k instead of e^{-r}: relative bias below s * dt
        exact = (1 - math.exp(-2 * s)) / 2
        assert abs(y2.mean() - exact) <= 3 * se + exact * s * 0.01


def test_z_first_coordinate_and_brownian_second_moment():
    p = _paths(sde.brownian(1), [0.0], n_steps=10, n=50_000, seed=2)
    z = z_at(p, 0.0, 0.5)
    assert np.all(z.z[:, 0] == 1.0)
    sq = np.sum(z.spatial ** 2, axis=-1)
    assert abs(sq.mean() - 2.0) <= 3 * sq.std(ddof=1) / math.sqrt(sq.size)


def test_z_undefined_at_start():
    p = _paths(sde.brownian(1), [0.0], n=10)
    with pytest.raises(InvalidArgumentError):
        z_at(p, 0.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        z_at(p, 0.5, 0.3)


def test_z_report_brownian_and_scaled():
    p = _paths(sde.brownian(2), [0.0, 0.0], n=20_000, seed=3)
    rep = z_moment_report(p, sde.brownian(2), 0.0)
    assert rep.all_passed
    k = int(np.flatnonzero(np.isclose(rep.s, 0.5))[0])
    ez = rep.columns["emp_EZ2"][k]
    assert abs(ez - 4.0) <= 3 * rep.columns["se_EZ2"][k]
    assert rep.columns["bound_iv"][k] >= 4.0
    c2 = sde.brownian(2, scale=2.0)
    p2 = _paths(c2, [0.0, 0.0], n=20_000, seed=3)
    rep2 = z_moment_report(p2, c2, 0.0)
    assert rep2.all_passed
    assert abs(rep2.columns["emp_EZ2"][k] - 2 / (4 * 0.5)) <= 3 * rep2.columns["se_EZ2"][k]


def test_z_second_moment_grows_like_inverse_elapsed():
    p = _paths(sde.brownian(1), [0.0], n_steps=64, n=20_000, seed=5)
    rep = z_moment_report(p, sde.brownian(1), 0.0)
    scaled = rep.columns["emp_EZ2"] * rep.s
    assert np.all((scaled > 0.5) & (scaled < 2.0))


def test_bounds_formulae():
    # c -> 0 limit of the Z second-moment bound is d / (alpha h)
    assert z_second_moment_bound(2, 1.0, 1e-12, 0.5) == pytest.approx(4.0, rel=1e-9)
    assert y_second_moment_bound(2, 4.0, 1.0, 1.0) == pytest.approx(0.5 * math.e ** 2)


def test_report_needs_enough_paths():
    p = _paths(sde.brownian(1), [0.0], n=10)
    with pytest.raises(InvalidArgumentError):
        z_moment_report(p, sde.brownian(1), 0.0)


def test_moment_bounds_hold_on_builtins():
    for c, x in [(sde.ornstein_uhlenbeck(2), [0.5, -0.5]), (sde.double_well(1), [0.3]),
                 (sde.geometric(1, vol=0.2, box_lo=0.5, box_hi=2.0), [1.0])]:
        p = _paths(c, x, n=2000, seed=9)
        assert z_moment_report(p, c, 0.0).all_passed
        assert sde.moment_bound_report_X_J(p, c).all_passed


def test_singular_sigma_raises():
    zero = np.zeros((1, 1))

    def sigma(t, x):
        return np.broadcast_to(zero, (x.shape[0], 1, 1))

    c = sde.CoefficientSet(1, lambda t, x: 0 * x, sigma, lambda t, x: np.zeros((x.shape[0], 1, 1)),
                           lambda t, x: np.zeros((x.shape[0], 1, 1, 1)), alpha=1.0, c_mono=1.0)
    solver = SigmaSolver(c)
    with pytest.raises(IllConditionedSigmaError):
        solver.solve(0.0, np.zeros((3, 1)), np.ones((3, 1)))


def test_state_dependent_sigma_solve():
    c = sde.geometric(2, vol=0.3, box_lo=0.5, box_hi=2.0)
    x = np.array([[1.0, 2.0], [0.5, 0.7]])
    rhs = np.array([[0.3, -0.6], [1.0, 2.0]])
    y = bel_increment(SigmaSolver(c), 0.0, x, None, rhs)
    np.testing.assert_allclose(y, rhs / (0.3 * x), rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(0.2, 3.0),
       st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_sigma_inverse_respects_ellipticity(entries, shift, w):
    S = np.array(entries).reshape(2, 2) + shift * 3 * np.eye(2)
    alpha = float(np.linalg.eigvalsh(S @ S.T).min())
    if alpha < 1e-6:
        return
    c = sde.linear(np.zeros((2, 2)), S=S, alpha=alpha)
    w = np.array([w])
    y = SigmaSolver(c).solve(0.0, np.zeros((1, 2)), w)
    assert np.linalg.norm(y) <= np.linalg.norm(w) / math.sqrt(alpha) * (1 + 1e-12) + 1e-300
    np.testing.assert_allclose(y @ S.T, w, atol=1e-12 * (1 + np.abs(w).max()))
