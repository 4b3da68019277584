"""Bismut-Elworthy-Li weights.

Along a path started at ``(t, x)``

    Y_s = int_t^s sigma(r, X_r)^{-1} (dX_r/dx) dW_r,
    Z_s = (1, Y_s / (s - t)),

with the stochastic integral taken as a left-point Ito sum.  Solves against
sigma are linear solves, never explicit inverses.
"""

from dataclasses import dataclass, replace
import math

import numpy as np
from scipy import linalg

from .errors import IllConditionedSigmaError, InvalidArgumentError
from .sde import _mean_se

RESIDUAL_TOL = 1e-8


class SigmaSolver:
    """Solves ``sigma(t, x) y = rhs`` for a batch of right-hand sides.

    For state-independent sigma one LU factorisation is reused.
    """

    def __init__(self, coeffs):
        self.coeffs = coeffs
        self._lu = None
        self._sigma0 = None
        if coeffs.sigma_constant:
            s = np.asarray(coeffs.sigma(0.0, np.zeros((1, coeffs.d)))[0], dtype=float)
            self._sigma0 = s
            if coeffs.d > 1:
                self._lu = linalg.lu_factor(s, check_finite=True)

    def solve(self, t, X, rhs, sigma_val=None):
        d = self.coeffs.d
        if self._sigma0 is not None:
            sig = self._sigma0
            if d == 1:
                y = rhs / sig[0, 0]
            else:
                y = linalg.lu_solve(self._lu, rhs.T, check_finite=False).T
            resid = rhs - y @ sig.T
        else:
            sig = self.coeffs.sigma(t, X) if sigma_val is None else sigma_val
            if d == 1:
                with np.errstate(divide="ignore", invalid="ignore"):
                    y = rhs / sig[:, :, 0]
            else:
                try:
                    y = np.linalg.solve(sig, rhs[:, :, None])[:, :, 0]
                except np.linalg.LinAlgError as exc:
                    raise IllConditionedSigmaError(f"singular sigma at t={t}") from exc
            resid = rhs - np.einsum("nab,nb->na", sig, y)
        rn = np.linalg.norm(resid, axis=-1)
        bn = np.linalg.norm(rhs, axis=-1)
        bad = ((rn > RESIDUAL_TOL * bn) & (bn > 0)) | ~np.all(np.isfinite(y), axis=-1)
        if bad.any():
            worst = int(np.flatnonzero(bad)[0])
            raise IllConditionedSigmaError(
                f"sigma solve residual {rn[worst]:.3e} exceeds {RESIDUAL_TOL:g} * |rhs| at t={t}",
                residual=float(rn[worst]))
        return y


def bel_increment(solver, t, X, J, dW, sigma_val=None):
    """``sigma(t, X)^{-1} J dW`` for a batch; the Ito integrand at the left point."""
    if J is None:
        rhs = dW
    else:
        rhs = np.einsum("nij,nj->ni", J, dW)
    return solver.solve(t, X, rhs, sigma_val=sigma_val)


def accumulate_Y(paths, coeffs):
    """Return a copy of ``paths`` with the running BEL integral ``Y`` filled in."""
    if paths.X is None or paths.J is None or paths.dW is None:
        raise InvalidArgumentError("paths need X, J and dW")
    solver = SigmaSolver(coeffs)
    n, n_nodes, d = paths.X.shape
    Y = np.zeros((n, n_nodes, d))
    nodes = paths.grid.nodes
    ok = paths.ok
    for k in range(n_nodes - 1):
        inc = np.zeros((n, d))
        inc[ok] = bel_increment(solver, nodes[k], paths.X[ok, k], paths.J[ok, k], paths.dW[ok, k])
        Y[:, k + 1] = Y[:, k] + inc
    return replace(paths, Y=Y)


@dataclass
class ZSample:
    s: float
    z: np.ndarray  # (n_paths, d + 1)

    @property
    def spatial(self):
        return self.z[:, 1:]


def z_at(paths, t, s):
    """BEL weight ``(1, Y_s / (s - t))`` at grid node ``s`` for every path."""
    if paths.Y is None:
        raise InvalidArgumentError("Y has not been accumulated")
    if not s > t:
        raise InvalidArgumentError(f"Z is undefined for s <= t (s={s}, t={t})")
    k = paths.grid.index_of(s)
    z = np.empty((paths.n_paths, paths.d + 1))
    z[:, 0] = 1.0
    z[:, 1:] = paths.Y[:, k] / (paths.grid.nodes[k] - t)
    return ZSample(s=float(paths.grid.nodes[k]), z=z)


def z_second_moment_bound(d, alpha, c, elapsed):
    """``d / (alpha h^2) * int_0^h exp(2 c r) dr`` with ``h = s - t``."""
    h = np.asarray(elapsed, dtype=float)
    return d / (alpha * h ** 2) * np.expm1(2.0 * c * h) / (2.0 * c)


def y_second_moment_bound(d, alpha, c, T):
    return d * T / alpha * math.exp(2.0 * c * T)


@dataclass
class ZMomentReport:
    s: np.ndarray
    columns: dict
    passed: np.ndarray

    @property
    def all_passed(self):
        return bool(np.all(self.passed))


def z_moment_report(paths, coeffs, t, min_paths=1000):
    """Per-node E|Y|^2 and E|Z_spatial|^2 against their bounds, for nodes s > t."""
    if paths.n_paths < min_paths:
        raise InvalidArgumentError(f"need at least {min_paths} paths, got {paths.n_paths}")
    if paths.Y is None:
        paths = accumulate_Y(paths, coeffs)
    ok = paths.ok
    nodes = paths.grid.nodes
    keep = nodes > t
    s = nodes[keep]
    Y = paths.Y[ok][:, keep]
    elapsed = s - t
    ey2, ey2_se = _mean_se(np.sum(Y ** 2, axis=-1))
    ez2, ez2_se = _mean_se(np.sum(Y ** 2, axis=-1) / elapsed ** 2)
    d, alpha, c = coeffs.d, coeffs.alpha, coeffs.c_mono
    bound_iii = np.full(s.size, y_second_moment_bound(d, alpha, c, paths.grid.T))
    bound_iv = z_second_moment_bound(d, alpha, c, elapsed)
    passed = (ey2 - 3 * ey2_se <= bound_iii) & (ez2 - 3 * ez2_se <= bound_iv)
    return ZMomentReport(s, {
        "emp_EY2": ey2, "se_EY2": ey2_se, "bound_iii": bound_iii,
        "emp_EZ2": ez2, "se_EZ2": ez2_se, "bound_iv": bound_iv,
    }, passed)
