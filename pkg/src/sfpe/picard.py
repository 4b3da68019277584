"""Monte-Carlo fixed-point map and Picard iteration.

For a grid node ``(t, x)`` the map is

    Phi(w)(t, x) = E[ g(X_T) Z_T + int_t^T f(r, X_r, w(r, X_r)) Z_r dr ]

with ``Z_r = (1, Y_r / (r - t))`` the Bismut-Elworthy-Li weight.  The time
integral uses the simulation nodes of a grid graded like ``t + u^2`` on the
first 10% of ``[t, T]`` (weights uniform in ``u``) and left rectangles on the
rest, which keeps the ``(r - t)^{-1/2}`` behaviour of ``Z`` out of the
quadrature error.

Every node draws its Brownian increments from its own counter-based stream
``(base_seed, node_index)``, so repeated sweeps and paired evaluations use
common random numbers and results do not depend on the worker count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional
import logging
import math
import os
import time

import numpy as np

from . import rng
from .bel import SigmaSolver, bel_increment
from .errors import DivergingIterationError, FailedSweepError, InvalidArgumentError
from .sde import CoefficientSet, TimeGrid, euler_step, _flag_bad
from .value import (LyapunovV, ValueGrid, WeightedNormSpec, evaluate, lyapunov_condition_probe,
                    log_weighted_norm, weighted_norm)

log = logging.getLogger(__name__)

MAX_DIVERGED_FRACTION = 1e-3
WORKERS_ENV = "SFPE_WORKERS"


@dataclass
class GridSpec:
    lo: np.ndarray
    hi: np.ndarray
    n_space: tuple
    n_time: int = 11
    delta_T: Optional[float] = None

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        self.n_space = tuple(int(n) for n in np.broadcast_to(np.atleast_1d(self.n_space), self.lo.shape))


@dataclass
class Problem:
    coeffs: CoefficientSet
    T: float
    g: Callable
    f: Callable
    L: float
    grid: GridSpec
    V: LyapunovV = field(default_factory=LyapunovV)
    c_V: Optional[float] = None
    domain: Optional[tuple] = None
    name: str = "problem"

    def __post_init__(self):
        if not self.T > 0:
            raise InvalidArgumentError("T must be positive")
        if not self.L >= 0:
            raise InvalidArgumentError("L must be non-negative")
        if self.grid.lo.size != self.coeffs.d:
            raise InvalidArgumentError("grid box dimension differs from the coefficients")

    @property
    def d(self):
        return self.coeffs.d

    @property
    def delta_T(self):
        return self.T / 50.0 if self.grid.delta_T is None else self.grid.delta_T

    def zero_grid(self):
        return ValueGrid.zeros(self.T, self.grid.lo, self.grid.hi, self.grid.n_space,
                               n_time=self.grid.n_time, delta_T=self.delta_T)


@dataclass
class McConfig:
    n_paths: int = 2000
    n_steps: int = 50
    base_seed: int = 0
    taming: Optional[bool] = None
    quadrature: str = "sqrt-graded"
    graded_fraction: float = 0.1
    # subtract g(x) and f at the start node from the spatial weight terms;
    # unbiased because E[Y] = 0 exactly under the left-point sum
    baseline: bool = True
    max_batch: int = 1 << 20
    probe_paths: int = 4000

    def __post_init__(self):
        if self.n_paths < 100:
            raise InvalidArgumentError("n_paths must be >= 100")
        if self.n_steps < 10:
            raise InvalidArgumentError("n_steps must be >= 10")
        if self.quadrature != "sqrt-graded":
            raise InvalidArgumentError(f"unknown quadrature rule {self.quadrature!r}")


def resolve_workers(workers=None):
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def lambda_star(c_V, L):
    """Smallest weight rate with guaranteed contraction factor 1/2: ``c^2 L^2 pi^3``."""
    if not (c_V > 0 and L > 0):
        raise InvalidArgumentError("c_V and L must be positive")
    return c_V ** 2 * L ** 2 * math.pi ** 3


def contraction_factor(c_V, L, lam):
    """Guaranteed Lipschitz constant ``c L sqrt(pi^3 / (4 lam))`` of Phi in the lam-norm."""
    return c_V * L * math.sqrt(math.pi ** 3 / (4.0 * lam))


def simulation_grid(t, T, mc):
    return TimeGrid.singular_start(t, T, mc.n_steps, fraction=mc.graded_fraction)


def quadrature_weights(grid):
    """Weights on simulation nodes for ``int_t^T h(r) dr``.

    Graded head: node ``k`` carries ``r_k - r_{k-1}`` (so ``r = t`` itself,
    where Z is undefined, gets no weight).  Uniform tail: left rectangles.
    """
    nodes = grid.nodes
    m, n = grid.n_graded, grid.n_steps
    if m < 1:
        raise InvalidArgumentError("quadrature needs a graded head")
    w = np.zeros(n + 1)
    w[1:m + 1] += np.diff(nodes[:m + 1])
    w[m:n] += np.diff(nodes[m:])
    return w


def _block_estimates(vfs, problem, mc, t, xs, streams):
    """Per-path estimators of Phi(w)(t, x) for each w in ``vfs`` on shared paths.

    Returns (est, ok) with est of shape (len(vfs), n_nodes, n_paths, m).
    """
    coeffs = problem.coeffs
    d = coeffs.d
    n = mc.n_paths
    n_nodes = xs.shape[0]
    B = n_nodes * n
    tamed = coeffs.tamed if mc.taming is None else mc.taming
    grid = simulation_grid(t, problem.T, mc)
    weights = quadrature_weights(grid)
    nodes = grid.nodes
    solver = SigmaSolver(coeffs)
    X = np.repeat(xs, n, axis=0)
    J = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    Y = np.zeros((B, d))
    acc0 = [np.zeros(B) for _ in vfs]
    acc = [np.zeros((B, d)) for _ in vfs]
    ok = np.ones(B, dtype=bool)
    x_start = X.copy()
    if mc.baseline:
        f0 = [np.repeat(problem.f(t, xs, evaluate(vf, t, xs)), n) for vf in vfs]
        g0 = np.repeat(problem.g(xs), n)
    for k in range(grid.n_steps):
        r = nodes[k]
        wk = weights[k]
        if wk > 0:
            read_t = min(r, vfs[0].t_max)
            scale = wk / (r - t)
            for i, vf in enumerate(vfs):
                fv = problem.f(r, X, evaluate(vf, read_t, X))
                acc0[i] += wk * fv
                if mc.baseline:
                    fv = fv - f0[i]
                acc[i] += (scale * fv)[:, None] * Y
        dt = grid.steps[k]
        sq = math.sqrt(dt)
        dW = np.concatenate([sq * rng.step_normals(mc.base_seed, s, k, n, d) for s in streams])
        sigma_val = None if coeffs.sigma_constant else coeffs.sigma(r, X)
        Y += bel_increment(solver, r, X, J, dW, sigma_val=sigma_val)
        with np.errstate(over="ignore", invalid="ignore"):
            X, J = euler_step(coeffs, r, dt, X, J, dW, tamed=tamed, sigma_val=sigma_val)
            bad = _flag_bad(X, problem.domain)
        if bad.any():
            ok &= ~bad
            X[bad] = x_start[bad]
            J[bad] = np.eye(d)
            Y[bad] = 0.0
    gT = problem.g(X)
    m = d + 1
    est = np.empty((len(vfs), B, m))
    tau = problem.T - t
    for i in range(len(vfs)):
        est[i, :, 0] = gT + acc0[i]
        gw = gT - g0 if mc.baseline else gT
        est[i, :, 1:] = (gw / tau)[:, None] * Y + acc[i]
    return est.reshape(len(vfs), n_nodes, n, m), ok.reshape(n_nodes, n)


def _node_stats(est, ok):
    """Means and standard errors over paths, excluding diverged ones."""
    # est: (n_nodes, n_paths, m); reduce over a contiguous path axis so each
    # node's mean is summed in the same order as a plain 1-d mean
    est = np.ascontiguousarray(np.moveaxis(est, 1, -1))
    if ok.all():
        n = est.shape[-1]
        return est.mean(axis=-1), est.std(axis=-1, ddof=1) / math.sqrt(n)
    means = np.empty(est.shape[:2])
    ses = np.empty_like(means)
    for j in range(est.shape[0]):
        e = est[j][:, ok[j]]
        means[j] = e.mean(axis=-1)
        ses[j] = e.std(axis=-1, ddof=1) / math.sqrt(e.shape[-1])
    return means, ses


@dataclass
class PhiResult:
    grids: list
    diff_stderr: Optional[np.ndarray]
    diverged_fraction: float


def _tasks(vf, mc):
    S = int(np.prod(vf.n_space))
    per_task = max(1, mc.max_batch // mc.n_paths)
    tasks = []
    for i in range(vf.times.size):
        for start in range(0, S, per_task):
            tasks.append((i, start, min(S, start + per_task)))
    return S, tasks


def apply_phi_many(vfs, problem, mc, workers=None):
    """Apply Phi to several grids on identical paths (common random numbers)."""
    vf = vfs[0]
    for other in vfs[1:]:
        if not vf.same_nodes(other):
            raise InvalidArgumentError("grids have different node sets")
    if vf.d != problem.d:
        raise InvalidArgumentError("grid dimension differs from the problem")
    pts = vf.space_points()
    S, tasks = _tasks(vf, mc)
    shape = (vf.times.size, S, vf.m)
    means = np.empty((len(vfs),) + shape)
    ses = np.empty_like(means)
    dse = np.empty(shape) if len(vfs) == 2 else None
    diverged = 0

    def run(task):
        i, a, b = task
        streams = [i * S + j for j in range(a, b)]
        est, ok = _block_estimates(vfs, problem, mc, float(vf.times[i]), pts[a:b], streams)
        out = [_node_stats(e, ok) for e in est]
        dstat = _node_stats(est[0] - est[1], ok)[1] if dse is not None else None
        return task, out, dstat, int((~ok).sum())

    n_workers = resolve_workers(workers)
    if n_workers == 1:
        results = map(run, tasks)
    else:
        pool = ThreadPoolExecutor(max_workers=n_workers)
        results = pool.map(run, tasks)
    try:
        for (i, a, b), out, dstat, nbad in results:
            for q, (mu, se) in enumerate(out):
                means[q, i, a:b] = mu
                ses[q, i, a:b] = se
            if dse is not None:
                dse[i, a:b] = dstat
            diverged += nbad
    finally:
        if n_workers > 1:
            pool.shutdown()
    total = vf.times.size * S * mc.n_paths
    frac = diverged / total
    if frac > MAX_DIVERGED_FRACTION:
        raise FailedSweepError(f"{diverged} of {total} paths diverged ({frac:.2%})",
                               diverged_fraction=frac)
    bad = ~np.all(np.isfinite(means), axis=-1)
    if bad.any():
        q, i, j = np.argwhere(bad)[0]
        raise FailedSweepError(f"non-finite estimate at time index {i}, space index {j}",
                               node=(int(i), int(j)))
    full = vf.times.shape + vf.n_space + (vf.m,)
    grids = [vf.with_values(means[q].reshape(full), stderr=ses[q].reshape(full))
             for q in range(len(vfs))]
    return PhiResult(grids, None if dse is None else dse.reshape(full), frac)


def phi_path_estimates(vf, problem, mc, time_index, space_index):
    """Per-path estimators ``(n_paths, d + 1)`` behind one node of :func:`apply_phi`."""
    S = int(np.prod(vf.n_space))
    pts = vf.space_points()
    est, ok = _block_estimates([vf], problem, mc, float(vf.times[time_index]),
                               pts[space_index:space_index + 1], [time_index * S + space_index])
    return est[0, 0], ok[0]


def apply_phi(vf, problem, mc, workers=None):
    """One Monte-Carlo application of the fixed-point map; per-node SEs in ``.stderr``."""
    return apply_phi_many([vf], problem, mc, workers).grids[0]


def feynman_kac_estimate(paths, problem, vf):
    """Classical weight-one estimator ``g(X_T) + sum_k w_k f(r_k, X_k, w(r_k, X_k))``.

    Uses an already simulated bundle on the solver's simulation grid.
    """
    grid = paths.grid
    weights = quadrature_weights(grid)
    acc = np.zeros(paths.n_paths)
    for k in range(grid.n_steps):
        wk = weights[k]
        if wk > 0:
            r = grid.nodes[k]
            X = paths.X[:, k]
            acc += wk * problem.f(r, X, evaluate(vf, min(r, vf.t_max), X))
    return problem.g(paths.X[:, -1]) + acc


@dataclass
class SolveDiagnostics:
    lam: float
    c_V: float
    distances: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    noise_floors: list = field(default_factory=list)
    max_stderr: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self):
        return len(self.distances)

    def rows(self):
        """Per-sweep rows for reports (wall-clock excluded to keep them reproducible)."""
        out = []
        for k, dist in enumerate(self.distances):
            out.append({
                "iteration": k + 1,
                "distance": dist,
                "ratio": self.ratios[k],
                "noise_floor": self.noise_floors[k],
                "max_se_value": self.max_stderr[k][0],
                "max_se_gradient": self.max_stderr[k][1],
            })
        return out


def estimate_c_V(problem, mc, inflate=1.25):
    """Lyapunov constant from probes at box corners/centre, inflated by 25%."""
    lo, hi = problem.grid.lo, problem.grid.hi
    d = problem.d
    if d <= 2:
        axes = [np.array([l, 0.5 * (l + h), h]) for l, h in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([g.ravel() for g in mesh], axis=-1)
    else:
        points = [0.5 * (lo + hi)]
        for k in range(d):
            for edge in (lo[k], hi[k]):
                p = 0.5 * (lo + hi)
                p[k] = edge
                points.append(p)
        points = np.array(points)
    best = 0.0
    stream = 1 << 40
    for x in points:
        for frac in (1 / 16, 1 / 4, 1 / 2, 1.0):
            s = frac * problem.T
            probe = lyapunov_condition_probe(problem.coeffs, problem.V, 0.0, x, s, mc.probe_paths,
                                             n_steps=max(10, mc.n_steps // 2),
                                             base_seed=mc.base_seed, stream=stream)
            stream += 1
            best = max(best, probe.ci_high)
    return inflate * best


def _noise_floor(grid, spec):
    return weighted_norm(grid.with_values(grid.stderr), spec)


def solve(problem, mc, tol, max_iters=20, lam=None, workers=None, v0=None, callback=None):
    """Picard iteration ``v_{k+1} = Phi(v_k)`` from ``v_0 = 0``.

    Stops once ``|v_{k+1} - v_k|_lam <= tol``.  Raises
    :class:`DivergingIterationError` if the distance grows for three
    consecutive sweeps while above the Monte-Carlo noise floor.
    """
    if not tol > 0:
        raise InvalidArgumentError("tol must be positive")
    c_V = problem.c_V if problem.c_V is not None else estimate_c_V(problem, mc)
    if lam is None:
        lam = lambda_star(c_V, problem.L) if problem.L > 0 else 0.0
    spec = WeightedNormSpec(lam, problem.V, problem.T)
    diag = SolveDiagnostics(lam=lam, c_V=c_V)
    v = problem.zero_grid() if v0 is None else v0
    growing = 0
    for k in range(max_iters):
        start = time.perf_counter()
        v_new = apply_phi(v, problem, mc, workers)
        dist = weighted_norm(v_new, spec, other=v)
        noise = _noise_floor(v_new, spec)
        prev = diag.distances[-1] if diag.distances else None
        ratio = dist / prev if prev else float("nan")
        diag.distances.append(dist)
        diag.ratios.append(ratio)
        diag.noise_floors.append(noise)
        se = v_new.stderr.reshape(-1, v_new.m)
        diag.max_stderr.append((float(se[:, 0].max()), float(se[:, 1:].max())))
        diag.wall_clock.append(time.perf_counter() - start)
        log.info("sweep %d: distance %.6g ratio %.4g noise %.4g", k + 1, dist, ratio, noise)
        if callback is not None:
            callback(k + 1, v_new, diag)
        v = v_new
        if dist <= tol:
            diag.converged = True
            break
        if prev and ratio > 1 and dist > noise:
            growing += 1
            if growing >= 3:
                raise DivergingIterationError(
                    f"distance grew for 3 consecutive sweeps (last ratio {ratio:.3g})", diagnostics=diag)
        else:
            growing = 0
    return v, diag


@dataclass
class ContractionProbe:
    ratio: float
    noise: float
    lam: float
    guaranteed: float


def contraction_probe(problem, w1, w2, lam, mc, workers=None):
    """``|Phi w1 - Phi w2|_lam / |w1 - w2|_lam`` on common random numbers.

    ``noise`` is the lam-norm of the per-node standard error of the paired
    difference, relative to ``|w1 - w2|_lam``.
    """
    spec = WeightedNormSpec(lam, problem.V, problem.T)
    diff_in = w1 - w2
    log_den = log_weighted_norm(diff_in, spec)
    if log_den == -math.inf:
        raise InvalidArgumentError("w1 and w2 coincide in the weighted norm")
    res = apply_phi_many([w1, w2], problem, mc, workers)
    p1, p2 = res.grids
    log_num = log_weighted_norm(p1 - p2, spec)
    log_noise = log_weighted_norm(w1.with_values(res.diff_stderr), spec)
    c_V = problem.c_V if problem.c_V is not None else float("nan")
    guaranteed = contraction_factor(c_V, problem.L, lam) if lam > 0 and problem.L > 0 else float("nan")
    return ContractionProbe(ratio=math.exp(log_num - log_den), noise=math.exp(log_noise - log_den),
                            lam=lam, guaranteed=guaranteed)


@dataclass
class IntegrabilityReport:
    sup_terminal: float
    sup_nonlinearity: float
    sup_terminal_inner: float
    sup_nonlinearity_inner: float
    finite: bool
    growing: bool


def integrability_guard(problem, samples, growth_factor=1.5):
    """Sampled sups of ``|g|/V(T, .)`` and ``|f(t, ., 0)| sqrt(T - t) / V``.

    ``growing`` flags a sup over all samples exceeding ``growth_factor``
    times the sup over the inner half (by norm) of the samples, the signature
    of data outgrowing the Lyapunov weight.
    """
    t, x = samples
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    T = problem.T
    ratio_g = np.abs(problem.g(x)) / problem.V(T, x)
    zero = np.zeros((x.shape[0], problem.d + 1))
    ratio_f = np.abs(problem.f(t, x, zero)) * np.sqrt(np.maximum(T - t, 0.0)) / problem.V(t, x)
    radius = np.linalg.norm(x, axis=-1)
    inner = radius <= 0.5 * radius.max()
    sg, sf = float(ratio_g.max()), float(ratio_f.max())
    sgi = float(ratio_g[inner].max()) if inner.any() else 0.0
    sfi = float(ratio_f[inner].max()) if inner.any() else 0.0
    finite = math.isfinite(sg) and math.isfinite(sf)
    growing = (not finite) or sg > growth_factor * sgi or sf > growth_factor * sfi
    return IntegrabilityReport(sg, sf, sgi, sfi, finite, bool(growing))


def check_lipschitz(problem, n=1000, seed=0):
    """Largest sampled ``|f(t,x,v) - f(t,x,w)| / |v - w|`` over the grid box."""
    g = np.random.default_rng(seed)
    d = problem.d
    t = g.uniform(0.0, problem.T * (1 - 1e-9), n)
    x = g.uniform(problem.grid.lo, problem.grid.hi, (n, d))
    v = g.normal(0.0, 3.0, (n, d + 1))
    w = g.normal(0.0, 3.0, (n, d + 1))
    num = np.abs(problem.f(t, x, v) - problem.f(t, x, w))
    return float(np.max(num / np.linalg.norm(v - w, axis=-1)))
