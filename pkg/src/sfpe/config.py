"""Problem files: INI-style ``[section]`` headers with ``key = value`` lines.

Example::

    [problem]
    name = sine
    T = 1.0
    dimension = 1

    [coefficients]
    kind = brownian          # brownian | ou | linear | geometric | double_well
    scale = 1.0

    [domain]
    lo = -inf
    hi = inf

    [grid]
    box_lo = -6.283185307179586
    box_hi = 6.283185307179586
    n_space = 41
    n_time = 11

    [terminal]
    kind = manufactured      # zero | identity | square | sine | call | manufactured

    [nonlinearity]
    kind = manufactured      # zero | constant | linear | manufactured
    L = 0.5
    family = trigonometric
    ell_z = 0.5

    [lyapunov]
    form = constant

Keys are case sensitive.  Vectors are whitespace separated; matrix rows
are separated by ``;``.  Comments start with ``#``.
Every parse error is an :class:`InvalidConfigError` naming the offending
``section.key``.
"""

from configparser import ConfigParser, Error as ConfigParserError
from dataclasses import dataclass
from typing import Optional
import hashlib
import json
import math

import numpy as np

from . import sde
from .errors import InvalidArgumentError
from .picard import GridSpec, Problem
from .value import LyapunovV
from . import verification as ver


class InvalidConfigError(InvalidArgumentError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.detail = message


@dataclass
class ParsedProblem:
    problem: Problem
    reference: Optional[ver.ReferenceSolution]
    canonical: dict
    tamed: bool


class _Section:
    def __init__(self, parser, name, required=True):
        self.name = name
        if not parser.has_section(name):
            if required:
                raise InvalidConfigError(name, "missing section")
            self.data = {}
        else:
            self.data = dict(parser.items(name))
        self.used = {}

    def _raw(self, key, default):
        if key in self.data:
            return self.data[key]
        if default is _REQUIRED:
            raise InvalidConfigError(f"{self.name}.{key}", "missing required field")
        return None

    def str(self, key, default=None):
        raw = self._raw(key, _REQUIRED if default is _REQUIRED else default)
        val = default if raw is None else raw.strip().lower()
        self.used[key] = val
        return val

    def float(self, key, default=None):
        raw = self._raw(key, default)
        if raw is None:
            self.used[key] = default
            return default
        try:
            val = float(raw)
        except ValueError:
            raise InvalidConfigError(f"{self.name}.{key}", f"not a number: {raw!r}") from None
        if math.isnan(val):
            raise InvalidConfigError(f"{self.name}.{key}", "NaN is not allowed")
        self.used[key] = val
        return val

    def int(self, key, default=None):
        val = self.float(key, default)
        if val is None:
            return None
        if val != int(val):
            raise InvalidConfigError(f"{self.name}.{key}", "must be an integer")
        self.used[key] = int(val)
        return int(val)

    def vector(self, key, default=None):
        raw = self._raw(key, default)
        if raw is None:
            self.used[key] = default
            return None if default is None else np.asarray(default, dtype=float)
        try:
            val = np.array([float(tok) for tok in raw.replace(",", " ").split()])
        except ValueError:
            raise InvalidConfigError(f"{self.name}.{key}", f"not a vector: {raw!r}") from None
        self.used[key] = val.tolist()
        return val

    def matrix(self, key):
        raw = self.data.get(key)
        if raw is None:
            self.used[key] = None
            return None
        try:
            rows = [[float(tok) for tok in row.replace(",", " ").split()] for row in raw.split(";") if row.strip()]
            val = np.array(rows, dtype=float)
        except ValueError:
            raise InvalidConfigError(f"{self.name}.{key}", f"not a matrix: {raw!r}") from None
        if val.ndim != 2:
            raise InvalidConfigError(f"{self.name}.{key}", "rows have different lengths")
        self.used[key] = val.tolist()
        return val


_REQUIRED = object()


def _positive(sec, key, val):
    if not val > 0:
        raise InvalidConfigError(f"{sec.name}.{key}", "must be positive")
    return val


def _coefficients(sec, d, grid):
    kind = sec.str("kind", _REQUIRED)
    c_mono = sec.float("c_mono")
    alpha = sec.float("alpha")
    try:
        if kind == "brownian":
            coeffs = sde.brownian(d, scale=sec.float("scale", 1.0))
        elif kind == "ou":
            coeffs = sde.ornstein_uhlenbeck(d, theta=sec.float("theta", 1.0), scale=sec.float("scale", 1.0))
        elif kind == "linear":
            A = sec.matrix("A")
            if A is None:
                raise InvalidConfigError("coefficients.A", "missing required field")
            coeffs = sde.linear(A, b=sec.vector("b"), S=sec.matrix("S"), c_mono=c_mono, alpha=alpha)
        elif kind == "geometric":
            coeffs = sde.geometric(d, vol=sec.float("vol", 0.2), drift=sec.float("drift", 0.0),
                                   box_lo=grid.lo, box_hi=grid.hi)
        elif kind == "double_well":
            coeffs = sde.double_well(d, kappa=sec.float("kappa", 1.0), scale=sec.float("scale", 1.0))
        else:
            raise InvalidConfigError("coefficients.kind", f"unknown kind {kind!r}")
    except InvalidConfigError:
        raise
    except InvalidArgumentError as exc:
        raise InvalidConfigError("coefficients", str(exc)) from None
    if coeffs.d != d:
        raise InvalidConfigError("problem.dimension", f"coefficients have dimension {coeffs.d}")
    if c_mono is not None:
        coeffs.c_mono = _positive(sec, "c_mono", c_mono)
    if alpha is not None:
        coeffs.alpha = _positive(sec, "alpha", alpha)
    coeffs.tamed = sec.str("taming", "false") in ("1", "true", "yes", "on")
    return coeffs


def _solution_family(sec, d, T):
    family = sec.str("family", "trigonometric")
    if family in ("trigonometric", "trig", "sine"):
        return ver.TrigU(d, T, k=sec.vector("k", [1.0]), rate=sec.float("rate", 0.5), amp=sec.float("amp", 1.0))
    if family in ("polynomial", "quadratic"):
        Q = sec.matrix("Q")
        return ver.QuadraticU(d, T, Q=Q, b=sec.vector("b", [0.0]), a=sec.float("a", 0.0))
    if family in ("gaussian", "bump"):
        return ver.GaussianBumpU(d, T, center=sec.vector("center", [0.0]), width=sec.float("width", 1.0),
                                 amp=sec.float("amp", 1.0), rate=sec.float("rate", 0.0))
    raise InvalidConfigError("nonlinearity.family", f"unknown family {family!r}")


def _terminal(sec, d, u_spec):
    kind = sec.str("kind", _REQUIRED)
    if kind == "zero":
        return lambda x: np.zeros(x.shape[0])
    if kind == "identity":
        return lambda x: x[:, 0].copy()
    if kind == "square":
        return lambda x: np.sum(x ** 2, axis=-1)
    if kind == "sine":
        return lambda x: np.sin(np.sum(x, axis=-1))
    if kind == "call":
        K = sec.float("strike", 1.0)
        return lambda x: np.maximum(x[:, 0] - K, 0.0)
    if kind == "manufactured":
        if u_spec is None:
            raise InvalidConfigError("terminal.kind", "manufactured terminal needs nonlinearity.kind = manufactured")
        return lambda x: u_spec.u(u_spec.T, x)
    raise InvalidConfigError("terminal.kind", f"unknown kind {kind!r}")


def parse_problem_text(text, source="<string>"):
    parser = ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case sensitive: T, L, A, S, c_V, delta_T
    try:
        parser.read_string(text, source=source)
    except ConfigParserError as exc:
        raise InvalidConfigError("file", str(exc).splitlines()[0]) from None

    top = _Section(parser, "problem")
    T = _positive(top, "T", top.float("T", _REQUIRED))
    d = top.int("dimension", 1)
    if not 1 <= d <= 4:
        raise InvalidConfigError("problem.dimension", "must be between 1 and 4")
    name = top.str("name", "problem")

    gsec = _Section(parser, "grid")
    lo = np.broadcast_to(gsec.vector("box_lo", _REQUIRED), (d,))
    hi = np.broadcast_to(gsec.vector("box_hi", _REQUIRED), (d,))
    if np.any(hi <= lo) or not np.all(np.isfinite(lo) & np.isfinite(hi)):
        raise InvalidConfigError("grid.box_hi", "grid box must be finite with hi > lo")
    default_nodes = 41 if d <= 2 else 11
    n_space = gsec.int("n_space", default_nodes)
    if n_space < 2:
        raise InvalidConfigError("grid.n_space", "need at least 2 nodes per axis")
    n_time = gsec.int("n_time", 11)
    if n_time < 1:
        raise InvalidConfigError("grid.n_time", "need at least 1 time node")
    delta_T = gsec.float("delta_T", T / 50.0)
    if not 0 < delta_T < T:
        raise InvalidConfigError("grid.delta_T", "must lie in (0, T)")
    grid = GridSpec(lo, hi, n_space, n_time=n_time, delta_T=delta_T)

    csec = _Section(parser, "coefficients")
    coeffs = _coefficients(csec, d, grid)

    dsec = _Section(parser, "domain", required=False)
    dlo = dsec.vector("lo", [-math.inf])
    dhi = dsec.vector("hi", [math.inf])
    domain = None
    if np.any(np.isfinite(dlo)) or np.any(np.isfinite(dhi)):
        domain = (np.broadcast_to(dlo, (d,)).copy(), np.broadcast_to(dhi, (d,)).copy())
        if np.any(domain[1] <= domain[0]):
            raise InvalidConfigError("domain.hi", "domain must have hi > lo")
        if np.any(lo < domain[0]) or np.any(hi > domain[1]):
            raise InvalidConfigError("grid.box_lo", "grid box must lie inside the domain")

    nsec = _Section(parser, "nonlinearity")
    L = nsec.float("L", _REQUIRED)
    if not L >= 0:
        raise InvalidConfigError("nonlinearity.L", "must be non-negative")
    nkind = nsec.str("kind", _REQUIRED)
    u_spec = None
    if nkind == "zero":
        coupling = ver.zero_coupling(d)
        f = lambda t, x, v: np.zeros(x.shape[0])
    elif nkind == "constant":
        value = nsec.float("value", _REQUIRED)
        coupling = ver.zero_coupling(d)
        f = lambda t, x, v: np.full(x.shape[0], value)
    elif nkind == "linear":
        coupling = ver.linear_coupling(nsec.float("ell_y", 0.0), nsec.vector("ell_z", [0.0]), d)
        f = lambda t, x, v: coupling(v[:, 0], v[:, 1:])
    elif nkind == "manufactured":
        coupling = ver.linear_coupling(nsec.float("ell_y", 0.0), nsec.vector("ell_z", [0.0]), d)
        u_spec = _solution_family(nsec, d, T)
        f = None
    else:
        raise InvalidConfigError("nonlinearity.kind", f"unknown kind {nkind!r}")
    if L < coupling.L * (1 - 1e-12):
        raise InvalidConfigError("nonlinearity.L", f"declared L={L:g} is below the coupling constant {coupling.L:g}")

    lsec = _Section(parser, "lyapunov", required=False)
    form = lsec.str("form", "poly")
    try:
        V = LyapunovV(form, p=lsec.float("p", coeffs.c_mono + 1.0), scale=lsec.float("scale", 1.0))
    except InvalidArgumentError as exc:
        raise InvalidConfigError("lyapunov.form", str(exc)) from None
    c_V = lsec.float("c_V")
    if c_V is not None:
        _positive(lsec, "c_V", c_V)

    tsec = _Section(parser, "terminal")
    g = _terminal(tsec, d, u_spec)

    reference = None
    try:
        if u_spec is not None:
            problem, reference = ver.manufactured_problem(u_spec, coeffs, coupling, grid, V=V, c_V=c_V,
                                                          name=name, domain=domain)
            problem.L = L
            problem.g = g
        else:
            problem = Problem(coeffs=coeffs, T=T, g=g, f=f, L=L, grid=grid, V=V, c_V=c_V,
                              domain=domain, name=name)
    except InvalidConfigError:
        raise
    except InvalidArgumentError as exc:
        raise InvalidConfigError("problem", str(exc)) from None

    canonical = {s.name: s.used for s in (top, gsec, csec, dsec, nsec, lsec, tsec)}
    return ParsedProblem(problem, reference, canonical, coeffs.tamed)


def load_problem(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidConfigError("problem", f"cannot read {path}: {exc.strerror}") from None
    return parse_problem_text(text, source=str(path))


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_hash(*parts):
    """sha256 over the canonical JSON of the given dicts."""
    blob = json.dumps(_jsonable(list(parts)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
