"""Grid representation of v: [0, T) x box -> R^{d+1} and its weighted norms.

The grid stops at ``T - delta_T``; the solution is only controlled up to a
``(T - t)^{-1/2}`` blow-up at the terminal time, so it is never stored there.

Binary layout written by :func:`save_grid` (all little-endian)::

    8 bytes   magic  b"SFPEGRD1"
    u32       d
    u32       m               (components per node, normally d + 1)
    u32       n_time
    u32 * d   nodes per spatial axis
    f64       T
    f64       delta_T
    f64 * n_time             time nodes
    f64 * 2d  (lo_1, hi_1, ..., lo_d, hi_d)
    u8        has_stderr
    f64 * ... values, row-major over (time, axis_1, ..., axis_d, component)
    f64 * ... stderr in the same layout, if present
"""

from dataclasses import dataclass, field, replace
from typing import Optional
import itertools
import math
import struct

import numpy as np

from .errors import InvalidArgumentError, OutOfRangeError
from .sde import simulate_paths, TimeGrid
from .bel import accumulate_Y

MAGIC = b"SFPEGRD1"


@dataclass
class ValueGrid:
    times: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_space: tuple
    values: np.ndarray
    T: float
    delta_T: float
    stderr: Optional[np.ndarray] = None
    axes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        self.n_space = tuple(int(n) for n in np.atleast_1d(self.n_space))
        d = self.lo.size
        if self.hi.size != d or len(self.n_space) != d:
            raise InvalidArgumentError("box bounds and node counts disagree in dimension")
        if np.any(self.hi <= self.lo):
            raise InvalidArgumentError("box must have hi > lo on every axis")
        if min(self.n_space) < 2:
            raise InvalidArgumentError("need at least two nodes per axis")
        if self.times.size < 1 or np.any(np.diff(self.times) <= 0):
            raise InvalidArgumentError("time nodes must be strictly increasing")
        if self.times[0] < 0 or self.times[-1] > self.T - self.delta_T * (1 - 1e-12):
            raise InvalidArgumentError("time nodes must lie in [0, T - delta_T]")
        if not self.delta_T > 0:
            raise InvalidArgumentError("delta_T must be positive")
        self.axes = [np.linspace(l, h, n) for l, h, n in zip(self.lo, self.hi, self.n_space)]
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.times.size,) + self.n_space
        if self.values.shape[:-1] != expected:
            raise InvalidArgumentError(f"values shape {self.values.shape} does not match grid {expected}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("grid values must be finite")

    @classmethod
    def zeros(cls, T, lo, hi, n_space, n_time=11, delta_T=None, m=None, times=None):
        delta_T = T / 50.0 if delta_T is None else delta_T
        if times is None:
            times = np.linspace(0.0, T - delta_T, n_time)
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        n_space = tuple(np.broadcast_to(np.atleast_1d(n_space), lo.shape))
        m = lo.size + 1 if m is None else m
        values = np.zeros((len(times),) + n_space + (m,))
        return cls(times, lo, np.broadcast_to(np.atleast_1d(hi), lo.shape), n_space, values, T, delta_T)

    @property
    def d(self):
        return self.lo.size

    @property
    def m(self):
        return self.values.shape[-1]

    @property
    def t_max(self):
        return float(self.times[-1])

    def space_points(self):
        """All spatial nodes, shape (prod(n_space), d), in row-major order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def same_nodes(self, other):
        return (self.times.shape == other.times.shape and np.array_equal(self.times, other.times)
                and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)
                and self.n_space == other.n_space and self.m == other.m
                and self.T == other.T and self.delta_T == other.delta_T)

    def with_values(self, values, stderr=None):
        return replace(self, values=values, stderr=stderr)

    def __sub__(self, other):
        if not self.same_nodes(other):
            raise InvalidArgumentError("grids have different node sets")
        return self.with_values(self.values - other.values)

    def evaluate(self, t, x):
        return evaluate(self, t, x)


def _axis_locate(axis, x):
    n = axis.size
    xc = np.clip(x, axis[0], axis[-1])
    i = np.clip(np.searchsorted(axis, xc, side="right") - 1, 0, n - 2)
    w = (xc - axis[i]) / (axis[i + 1] - axis[i])
    return i, w


def _time_locate(vf, t):
    t = float(t)
    if t > vf.t_max * (1 + 1e-15) + 1e-15 or t < vf.times[0] - 1e-15:
        raise OutOfRangeError(f"t={t} outside grid time support [{vf.times[0]}, {vf.t_max}]")
    if vf.times.size == 1:
        return 0, 0.0
    i = int(np.clip(np.searchsorted(vf.times, t, side="right") - 1, 0, vf.times.size - 2))
    w = (min(max(t, vf.times[0]), vf.t_max) - vf.times[i]) / (vf.times[i + 1] - vf.times[i])
    return i, w


def evaluate(vf, t, x):
    """Interpolate ``vf`` at a scalar time and a batch of points.

    Linear in time, multilinear in space, clamped at the box faces; exact at
    nodes.  ``x`` has shape (N, d) or (d,); returns (N, m) or (m,).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    d = vf.d
    if X.shape[-1] != d:
        raise InvalidArgumentError(f"points have dimension {X.shape[-1]}, grid has {d}")
    it, wt = _time_locate(vf, t)
    flat = vf.values.reshape(vf.times.size, -1, vf.m)
    # blend the two time slices first; exact when wt == 0 since 1.0 * a + 0.0 * b == a
    if vf.times.size == 1 or wt == 0.0:
        plane = flat[it]
    else:
        plane = (1.0 - wt) * flat[it] + wt * flat[it + 1]
    strides = np.cumprod((1,) + vf.n_space[::-1])[:-1][::-1]
    locs = [_axis_locate(vf.axes[k], X[:, k]) for k in range(d)]
    out = np.zeros((X.shape[0], vf.m))
    for corner in itertools.product((0, 1), repeat=d):
        idx = np.zeros(X.shape[0], dtype=np.int64)
        weight = None
        for k, bit in enumerate(corner):
            i, w = locs[k]
            idx += (i + bit) * strides[k]
            wk = w if bit else 1.0 - w
            weight = wk if weight is None else weight * wk
        out += weight[:, None] * np.take(plane, idx, axis=0)
    return out[0] if single else out


@dataclass(frozen=True)
class LyapunovV:
    """Positive weight ``V(t, x) = scale * (1 + |x|^p)``, or ``scale`` for form 'constant'."""

    form: str = "poly"
    p: float = 2.0
    scale: float = 1.0

    def __post_init__(self):
        if self.form not in ("poly", "constant"):
            raise InvalidArgumentError(f"unknown Lyapunov form {self.form!r}")
        if not self.scale > 0:
            raise InvalidArgumentError("Lyapunov scale must be positive")
        if self.form == "poly" and not self.p > 0:
            raise InvalidArgumentError("Lyapunov exponent must be positive")

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.form == "constant":
            return np.full(x.shape[:-1], self.scale)
        return self.scale * (1.0 + np.linalg.norm(x, axis=-1) ** self.p)


@dataclass(frozen=True)
class WeightedNormSpec:
    lam: float
    V: LyapunovV
    T: float

    def __post_init__(self):
        if not math.isfinite(self.lam):
            raise InvalidArgumentError("lambda must be finite")
        if not self.T > 0:
            raise InvalidArgumentError("T must be positive")


def _row_norms(values):
    """Euclidean norms over the last axis, rescaled so tiny or huge entries do not under/overflow."""
    scale = np.max(np.abs(values), axis=-1)
    safe = np.where(scale > 0, scale, 1.0)
    return scale * np.sqrt(np.sum((values / safe[..., None]) ** 2, axis=-1))


def _node_log_terms(values, vf, spec):
    pts = vf.space_points()
    Vx = spec.V(0.0, pts)  # V depends on x only for both built-in forms
    norms = _row_norms(values.reshape(vf.times.size, -1, values.shape[-1]))
    with np.errstate(divide="ignore"):
        return (spec.lam * vf.times[:, None] + np.log(norms)
                + 0.5 * np.log(spec.T - vf.times)[:, None] - np.log(Vx)[None, :])


def log_weighted_norm(w, spec):
    return float(np.max(_node_log_terms(w.values, w, spec)))


def weighted_norm(w, spec, other=None):
    """Discrete ``sup_nodes exp(lam t) |w(t,x)|_2 sqrt(T - t) / V(t, x)``.

    With ``other`` given, the norm of ``w - other``.  The sup over nodes is a
    lower bound for the sup over the continuum.
    """
    if other is not None:
        w = w - other
    if spec.lam * max(w.t_max, 0.0) < 700:
        pts = w.space_points()
        Vx = spec.V(0.0, pts)
        norms = _row_norms(w.values.reshape(w.times.size, -1, w.m))
        terms = np.exp(spec.lam * w.times)[:, None] * norms * np.sqrt(spec.T - w.times)[:, None] / Vx[None, :]
        return float(terms.max())
    return math.exp(log_weighted_norm(w, spec))


def weighted_norm_ratio(num, den, spec):
    """``|num|_lam / |den|_lam`` computed in log space (safe for large lam)."""
    ln = log_weighted_norm(num, spec)
    ld = log_weighted_norm(den, spec)
    if ld == -math.inf:
        raise InvalidArgumentError("denominator has zero weighted norm")
    return math.exp(ln - ld)


@dataclass
class LyapunovProbe:
    estimate: float
    stderr: float
    ci_low: float
    ci_high: float
    n_paths: int


def lyapunov_condition_probe(coeffs, V, t, x, s, n_paths, n_steps=50, base_seed=0, stream=0):
    """Estimate ``E[V(s, X_s) |Z_s|] sqrt(s - t) / V(t, x)`` with a 95% interval."""
    if not s > t:
        raise InvalidArgumentError("probe needs s > t")
    x = np.asarray(x, dtype=float).reshape(-1)
    grid = TimeGrid.uniform(t, s, n_steps)
    paths = accumulate_Y(simulate_paths(coeffs, t, x, grid, n_paths, base_seed, stream), coeffs)
    ok = paths.ok
    Xs = paths.X[ok, -1]
    zs = paths.Y[ok, -1] / (s - t)
    znorm = np.sqrt(1.0 + np.sum(zs ** 2, axis=-1))
    samples = V(s, Xs) * znorm * math.sqrt(s - t) / float(V(t, x[None, :])[0])
    est = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(samples.size))
    return LyapunovProbe(est, se, est - 1.96 * se, est + 1.96 * se, int(samples.size))


def save_grid(vf, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", vf.d, vf.m, vf.times.size))
        fh.write(struct.pack(f"<{vf.d}I", *vf.n_space))
        fh.write(struct.pack("<dd", vf.T, vf.delta_T))
        fh.write(vf.times.astype("<f8").tobytes())
        fh.write(np.column_stack([vf.lo, vf.hi]).ravel().astype("<f8").tobytes())
        fh.write(struct.pack("<B", 0 if vf.stderr is None else 1))
        fh.write(np.ascontiguousarray(vf.values, dtype="<f8").tobytes())
        if vf.stderr is not None:
            fh.write(np.ascontiguousarray(vf.stderr, dtype="<f8").tobytes())


def load_grid(path):
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise InvalidArgumentError(f"{path} is not a value-grid file")
        d, m, n_time = struct.unpack("<III", fh.read(12))
        n_space = struct.unpack(f"<{d}I", fh.read(4 * d))
        T, delta_T = struct.unpack("<dd", fh.read(16))
        times = np.frombuffer(fh.read(8 * n_time), dtype="<f8").astype(float)
        bounds = np.frombuffer(fh.read(16 * d), dtype="<f8").astype(float).reshape(d, 2)
        has_se = struct.unpack("<B", fh.read(1))[0]
        shape = (n_time,) + tuple(n_space) + (m,)
        count = int(np.prod(shape))
        values = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(float).reshape(shape)
        stderr = None
        if has_se:
            stderr = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(float).reshape(shape)
    return ValueGrid(times, bounds[:, 0], bounds[:, 1], n_space, values, T, delta_T, stderr=stderr)
