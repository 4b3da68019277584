"""Closed-form and manufactured benchmarks.

A manufactured problem starts from an analytic ``u`` and a Lipschitz
coupling ``ell(y, z)`` and sets

    f(t, x, v) = -(u_t + grad u . mu + 1/2 tr(sigma sigma^T Hess u))(t, x)
                 - ell(u, grad u)(t, x) + ell(v_1, v_{2..d+1}),

so that ``(u, grad u)`` is the fixed point of the problem.  All derivatives
are analytic; nothing here differentiates numerically.
"""

from dataclasses import dataclass
from typing import Callable, Optional
import math

import numpy as np

from . import sde
from .errors import InvalidArgumentError
from .picard import GridSpec, Problem
from .value import LyapunovV, ValueGrid

REQUIRED = ("u", "u_t", "grad", "hess")


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if d == 1 else x[None, :]
    return x


class AnalyticU:
    """Base for solution families; subclasses supply u, u_t, grad and hess.

    All methods take a scalar or (N,) time and (N, d) points.
    """

    family = "custom"

    def __init__(self, d, T):
        self.d = int(d)
        self.T = float(T)

    def u(self, t, x):
        raise NotImplementedError

    def u_t(self, t, x):
        raise NotImplementedError

    def grad(self, t, x):
        raise NotImplementedError

    def hess(self, t, x):
        raise NotImplementedError


class QuadraticU(AnalyticU):
    """``u = x^T Q x + b . x + a (T - t)``."""

    family = "polynomial"

    def __init__(self, d, T, Q=None, b=None, a=0.0):
        super().__init__(d, T)
        self.Q = np.zeros((d, d)) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
        self.Q = 0.5 * (self.Q + self.Q.T)
        self.b = np.zeros(d) if b is None else np.broadcast_to(np.asarray(b, dtype=float), (d,)).copy()
        self.a = float(a)

    def u(self, t, x):
        x = _as_batch(x, self.d)
        return np.einsum("ni,ij,nj->n", x, self.Q, x) + x @ self.b + self.a * (self.T - np.asarray(t, dtype=float))

    def u_t(self, t, x):
        x = _as_batch(x, self.d)
        return np.full(x.shape[0], -self.a)

    def grad(self, t, x):
        x = _as_batch(x, self.d)
        return 2.0 * x @ self.Q + self.b

    def hess(self, t, x):
        x = _as_batch(x, self.d)
        return np.broadcast_to(2.0 * self.Q, (x.shape[0], self.d, self.d))


class TrigU(AnalyticU):
    """``u = amp * exp(-rate (T - t)) * sin(k . x)``."""

    family = "trigonometric"

    def __init__(self, d, T, k=1.0, rate=0.5, amp=1.0):
        super().__init__(d, T)
        self.k = np.broadcast_to(np.asarray(k, dtype=float), (d,)).copy()
        self.rate = float(rate)
        self.amp = float(amp)

    def _decay(self, t):
        return self.amp * np.exp(-self.rate * (self.T - np.asarray(t, dtype=float)))

    def u(self, t, x):
        x = _as_batch(x, self.d)
        return self._decay(t) * np.sin(x @ self.k)

    def u_t(self, t, x):
        return self.rate * self.u(t, x)

    def grad(self, t, x):
        x = _as_batch(x, self.d)
        return (self._decay(t) * np.cos(x @ self.k))[:, None] * self.k

    def hess(self, t, x):
        x = _as_batch(x, self.d)
        return -(self._decay(t) * np.sin(x @ self.k))[:, None, None] * np.outer(self.k, self.k)


class GaussianBumpU(AnalyticU):
    """``u = amp * exp(-rate (T - t)) * exp(-|x - c|^2 / (2 w^2))``."""

    family = "gaussian"

    def __init__(self, d, T, center=0.0, width=1.0, amp=1.0, rate=0.0):
        super().__init__(d, T)
        self.center = np.broadcast_to(np.asarray(center, dtype=float), (d,)).copy()
        self.width = float(width)
        self.amp = float(amp)
        self.rate = float(rate)

    def u(self, t, x):
        x = _as_batch(x, self.d)
        r2 = np.sum((x - self.center) ** 2, axis=-1)
        return self.amp * np.exp(-self.rate * (self.T - np.asarray(t, dtype=float))) * np.exp(-0.5 * r2 / self.width ** 2)

    def u_t(self, t, x):
        return self.rate * self.u(t, x)

    def grad(self, t, x):
        x = _as_batch(x, self.d)
        return -self.u(t, x)[:, None] * (x - self.center) / self.width ** 2

    def hess(self, t, x):
        x = _as_batch(x, self.d)
        y = (x - self.center) / self.width ** 2
        outer = y[:, :, None] * y[:, None, :]
        return self.u(t, x)[:, None, None] * (outer - np.eye(self.d) / self.width ** 2)


@dataclass
class Coupling:
    """Lipschitz map ``ell(y, z)`` with its Lipschitz constant ``L`` (Euclidean)."""

    fn: Callable
    L: float
    name: str = "custom"

    def __call__(self, y, z):
        return self.fn(y, z)


def linear_coupling(ell_y=0.0, ell_z=0.0, d=1):
    """``ell(y, z) = ell_y * y + ell_z . z``; Lipschitz constant ``|(ell_y, ell_z)|``."""
    a = float(ell_y)
    b = np.broadcast_to(np.asarray(ell_z, dtype=float), (d,)).copy()
    L = math.sqrt(a * a + float(b @ b))

    def fn(y, z):
        return a * y + z @ b

    return Coupling(fn, L, name=f"linear({a:g}, {b.tolist()})")


def zero_coupling(d=1):
    return linear_coupling(0.0, 0.0, d)


@dataclass
class ReferenceSolution:
    u: Callable
    grad_u: Callable
    provenance: str
    T: float

    def exact_grid(self, like):
        """Exact ``(u, grad u)`` sampled on the nodes of ``like``."""
        pts = like.space_points()
        vals = np.empty(like.values.shape)
        for i, t in enumerate(like.times):
            block = np.concatenate([self.u(t, pts)[:, None], self.grad_u(t, pts)], axis=-1)
            vals[i] = block.reshape(like.n_space + (like.m,))
        return like.with_values(vals)


def pde_residual(u_spec, coeffs, f, t, x):
    """``u_t + grad u . mu + 1/2 tr(sigma sigma^T H) + f(t, x, (u, grad u))``; zero for a solution."""
    x = _as_batch(x, u_spec.d)
    mu = coeffs.mu(t, x)
    sig = coeffs.sigma(t, x)
    a = sig @ np.swapaxes(sig, -1, -2)
    gen = u_spec.u_t(t, x) + np.sum(u_spec.grad(t, x) * mu, axis=-1) \
        + 0.5 * np.einsum("nij,nji->n", a, u_spec.hess(t, x))
    v = np.concatenate([u_spec.u(t, x)[:, None], u_spec.grad(t, x)], axis=-1)
    return gen + f(t, x, v)


def manufactured_problem(u_spec, coeffs, ell, grid, V=None, c_V=None, name="manufactured", domain=None):
    """Problem whose fixed point is ``(u, grad u)`` for the given solution family."""
    for attr in REQUIRED:
        fn = getattr(u_spec, attr, None)
        if fn is None or (isinstance(u_spec, AnalyticU)
                          and getattr(type(u_spec), attr) is getattr(AnalyticU, attr)):
            raise InvalidArgumentError(f"solution family lacks {attr!r}")
    if u_spec.d != coeffs.d:
        raise InvalidArgumentError("solution and coefficients differ in dimension")
    T = u_spec.T

    def f(t, x, v):
        x = _as_batch(x, u_spec.d)
        mu = coeffs.mu(t, x)
        sig = coeffs.sigma(t, x)
        a = sig @ np.swapaxes(sig, -1, -2)
        grad = u_spec.grad(t, x)
        gen = u_spec.u_t(t, x) + np.sum(grad * mu, axis=-1) \
            + 0.5 * np.einsum("nij,nji->n", a, u_spec.hess(t, x))
        return -gen - ell(u_spec.u(t, x), grad) + ell(v[:, 0], v[:, 1:])

    def g(x):
        return u_spec.u(T, x)

    if V is None:
        V = LyapunovV("poly", p=coeffs.c_mono + 1.0)
    problem = Problem(coeffs=coeffs, T=T, g=g, f=f, L=ell.L, grid=grid, V=V, c_V=c_V,
                      domain=domain, name=name)
    ref = ReferenceSolution(u=u_spec.u, grad_u=u_spec.grad, provenance="manufactured", T=T)
    return problem, ref


@dataclass
class ErrorReport:
    sup_value: float
    sup_gradient: float
    rms_value: float
    rms_gradient: float
    weighted: float
    n_nodes: int

    def as_dict(self):
        return dict(self.__dict__)


def compare_to_reference(vf, ref, tau_cut=None, x_box=None, V=None):
    """Errors of ``vf`` against ``(u, grad u)`` over nodes with ``t <= T - tau_cut``.

    ``x_box`` optionally restricts the spatial nodes to a ``(lo, hi)`` box.
    ``weighted`` is the lambda = 0 weighted norm of the error over the region.
    """
    tau_cut = 5.0 * vf.delta_T if tau_cut is None else tau_cut
    V = LyapunovV() if V is None else V
    keep_t = vf.times <= vf.T - tau_cut + 1e-12
    pts = vf.space_points()
    keep_x = np.ones(pts.shape[0], dtype=bool)
    if x_box is not None:
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (vf.d,)) for b in x_box)
        keep_x = np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=-1)
    if not keep_t.any() or not keep_x.any():
        raise InvalidArgumentError("comparison region contains no grid nodes")
    exact = ref.exact_grid(vf).values.reshape(vf.times.size, -1, vf.m)
    got = vf.values.reshape(vf.times.size, -1, vf.m)
    err = (got - exact)[keep_t][:, keep_x]
    ev, eg = np.abs(err[..., 0]), np.linalg.norm(err[..., 1:], axis=-1)
    times = vf.times[keep_t]
    wnorm = np.linalg.norm(err, axis=-1) * np.sqrt(vf.T - times)[:, None] / V(0.0, pts[keep_x])[None, :]
    return ErrorReport(
        sup_value=float(ev.max()), sup_gradient=float(eg.max()),
        rms_value=float(np.sqrt(np.mean(ev ** 2))), rms_gradient=float(np.sqrt(np.mean(eg ** 2))),
        weighted=float(wnorm.max()), n_nodes=int(ev.size))


@dataclass
class Benchmark:
    name: str
    problem: Problem
    reference: ReferenceSolution
    # comparison box; None means the whole grid
    x_box: Optional[tuple] = None


def _brownian_problem(name, u_spec, ell, grid, V=None, c_V=None):
    coeffs = sde.brownian(u_spec.d)
    problem, ref = manufactured_problem(u_spec, coeffs, ell, grid, V=V, c_V=c_V, name=name)
    return problem, ref


def benchmark(name, T=1.0, n_space=None, n_time=11):
    """Named benchmark problems with exact references.

    identity     f = 0, g(x) = x; u = x
    heat_square  f = 0, g(x) = x^2; u = x^2 + (T - t)
    sine         u = sin(x) exp(-(T - t)/2), ell(y, z) = z / 2
    sine_free    same u, ell = 0 (so f = 0)
    ou_bump      OU drift, Gaussian bump, ell(y, z) = y / 4
    bump2d       d = 2 Brownian, Gaussian bump, ell(y, z) = (z_1 + z_2) / 4
    """
    if name in ("identity", "heat_square"):
        grid = GridSpec([-2.0], [2.0], n_space or 41, n_time=n_time)
        u = QuadraticU(1, T, b=1.0) if name == "identity" else QuadraticU(1, T, Q=1.0, a=1.0)
        problem, ref = _brownian_problem(name, u, zero_coupling(1), grid)
        ref.provenance = "closed-form"
        return Benchmark(name, problem, ref)
    if name in ("sine", "sine_free"):
        # clamping at the box faces biases nodes near them; the comparison box
        # keeps every compared node about 3 standard deviations of X_T inside
        grid = GridSpec([-2 * math.pi], [2 * math.pi], n_space or 41, n_time=n_time)
        ell = linear_coupling(0.0, 0.5, 1) if name == "sine" else zero_coupling(1)
        problem, ref = _brownian_problem(name, TrigU(1, T, k=1.0, rate=0.5), ell, grid,
                                         V=LyapunovV("constant"))
        return Benchmark(name, problem, ref, x_box=(-math.pi, math.pi))
    if name == "ou_bump":
        grid = GridSpec([-4.0], [4.0], n_space or 41, n_time=n_time)
        coeffs = sde.ornstein_uhlenbeck(1, theta=1.0)
        problem, ref = manufactured_problem(GaussianBumpU(1, T, width=1.0, rate=0.3), coeffs,
                                            linear_coupling(0.25, 0.0, 1), grid,
                                            V=LyapunovV("constant"), name=name)
        return Benchmark(name, problem, ref, x_box=(-2.0, 2.0))
    if name == "bump2d":
        grid = GridSpec([-4.0, -4.0], [4.0, 4.0], n_space or 17, n_time=n_time)
        problem, ref = _brownian_problem(name, GaussianBumpU(2, T, width=1.0, rate=0.2),
                                         linear_coupling(0.0, 0.25, 2), grid, V=LyapunovV("constant"))
        return Benchmark(name, problem, ref, x_box=(-2.0, 2.0))
    raise InvalidArgumentError(f"unknown benchmark {name!r}")


BENCHMARKS = ("identity", "heat_square", "sine", "sine_free", "ou_bump", "bump2d")
