"""Command-line entry point: ``sfpe <command> ...`` or ``python -m sfpe ...``.

Exit codes: 0 success, 2 invalid configuration (JSON error record on
stderr naming the field), 3 failed sweep or diverging iteration (JSON
record on stderr plus a diagnostics file).

Every CSV report starts with a ``# config_hash=... seed=...`` line.  Floats
are written with 17 significant digits and no artifact contains timings, so
a fixed seed gives byte-identical outputs for any worker count.
"""

import argparse
import csv
import json
import logging
import math
import sys

import numpy as np

from . import picard, sde, value
from . import verification as ver
from .bel import z_moment_report
from .config import InvalidConfigError, config_hash, load_problem
from .errors import DivergingIterationError, FailedSweepError, InvalidArgumentError
from .integrals import integral_check_suite

log = logging.getLogger("sfpe")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def write_csv(path, columns, rows, chash, seed):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={chash} seed={seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])


def _floats(text, name):
    try:
        return np.array([float(tok) for tok in text.replace(",", " ").split()])
    except ValueError:
        raise InvalidConfigError(name, f"not a list of numbers: {text!r}") from None


def _mc(args):
    try:
        return picard.McConfig(n_paths=args.paths, n_steps=args.steps, base_seed=args.seed)
    except InvalidArgumentError as exc:
        field = "paths" if "n_paths" in str(exc) else "steps"
        raise InvalidConfigError(field, str(exc)) from None


def _start_point(args, d):
    x = _floats(args.x, "x")
    if x.size == 1 and d > 1:
        x = np.full(d, x[0])
    if x.size != d:
        raise InvalidConfigError("x", f"expected {d} coordinates, got {x.size}")
    return x


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args):
    parsed = load_problem(args.problem)
    prob = parsed.problem
    x = _start_point(args, prob.d)
    if not 0 <= args.t0 < prob.T:
        raise InvalidConfigError("t0", "must lie in [0, T)")
    if args.paths < 1 or args.steps < 1:
        raise InvalidConfigError("paths", "paths and steps must be positive")
    grid = sde.TimeGrid.uniform(args.t0, prob.T, args.steps)
    paths = sde.simulate_paths(prob.coeffs, args.t0, x, grid, args.paths, base_seed=args.seed,
                               stream=0, domain=prob.domain)
    d = prob.d
    jcols = [f"J_{a + 1}{b + 1}" for a in range(d) for b in range(d)]
    cols = ["path_id", "s"] + [f"X_{i + 1}" for i in range(d)] + jcols + ["diverged"]
    rows = []
    for i in range(paths.n_paths):
        for k, s in enumerate(grid.nodes):
            row = {"path_id": i, "s": s, "diverged": bool(0 <= paths.diverged_at[i] <= k)}
            row.update({f"X_{a + 1}": paths.X[i, k, a] for a in range(d)})
            row.update({c: v for c, v in zip(jcols, paths.J[i, k].ravel())})
            rows.append(row)
    chash = config_hash(parsed.canonical, {"cmd": "simulate", "t0": args.t0, "x": x.tolist(),
                                           "paths": args.paths, "steps": args.steps})
    write_csv(args.out, cols, rows, chash, args.seed)
    n_bad = int((~paths.ok).sum())
    print(f"{args.paths} paths x {grid.nodes.size} nodes ({n_bad} diverged); written to {args.out}")
    return EXIT_OK


def _lambda_arg(text):
    if text == "auto":
        return None
    try:
        lam = float(text)
    except ValueError:
        raise InvalidConfigError("lambda", f"expected 'auto' or a number, got {text!r}") from None
    if not (math.isfinite(lam) and lam >= 0):
        raise InvalidConfigError("lambda", "must be finite and >= 0")
    return lam


def _diag_columns():
    return ["iteration", "distance", "ratio", "noise_floor", "max_se_value", "max_se_gradient"]


def cmd_solve(args):
    parsed = load_problem(args.problem)
    prob = parsed.problem
    mc = _mc(args)
    lam = _lambda_arg(args.lam)
    if not args.tol > 0:
        raise InvalidConfigError("tol", "must be positive")
    chash = config_hash(parsed.canonical, {"cmd": "solve", "paths": args.paths, "steps": args.steps,
                                           "tol": args.tol, "max_iters": args.max_iters, "lambda": args.lam})
    state = {}

    def keep(k, v, diag):
        state["diag"] = diag

    try:
        vf, diag = picard.solve(prob, mc, tol=args.tol, max_iters=args.max_iters, lam=lam,
                                workers=args.workers, callback=keep)
    except (FailedSweepError, DivergingIterationError) as exc:
        diag = getattr(exc, "diagnostics", None) or state.get("diag")
        _write_failure(args, exc, diag, chash)
        return EXIT_RUN
    value.save_grid(vf, args.out_grid)
    if args.out_diag:
        write_csv(args.out_diag, _diag_columns(), diag.rows(), chash, args.seed)
    status = "converged" if diag.converged else "stopped at max-iters"
    print(f"{status} after {diag.iterations} sweeps; lambda={diag.lam:.6g} c_V={diag.c_V:.6g}; "
          f"last distance {diag.distances[-1]:.6g}")
    if parsed.reference is not None:
        rep = ver.compare_to_reference(vf, parsed.reference)
        print(f"error vs reference: sup value {rep.sup_value:.3e}, sup gradient {rep.sup_gradient:.3e}")
    return EXIT_OK


def _write_failure(args, exc, diag, chash):
    path = args.out_failure
    record = {"error": type(exc).__name__, "message": str(exc), "config_hash": chash, "seed": args.seed,
              "node": list(exc.node) if getattr(exc, "node", None) else None,
              "diverged_fraction": getattr(exc, "diverged_fraction", None),
              "sweeps": diag.rows() if diag is not None else []}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    print(json.dumps({"error": record["error"], "message": record["message"], "diagnostics": path}),
          file=sys.stderr)


def cmd_verify_integrals(args):
    checks = integral_check_suite(n=args.n, seed=args.seed)
    rows = [{"a": c.query.a, "b": c.query.b, "lam": c.query.lam, "closed_form": c.closed_form,
             "oracle": c.oracle, "rel_err": c.rel_err, "bound": c.bound, "bound_ok": c.bound_ok,
             "pass": c.passed} for c in checks]
    cols = ["a", "b", "lam", "closed_form", "oracle", "rel_err", "bound", "bound_ok", "pass"]
    chash = config_hash({"cmd": "verify integrals", "n": args.n})
    write_csv(args.out, cols, rows, chash, args.seed)
    n_pass = sum(c.passed for c in checks)
    print(f"{n_pass}/{len(checks)} integral checks passed; report written to {args.out}")
    return EXIT_OK if n_pass == len(checks) else 1


def cmd_verify_moments(args):
    parsed = load_problem(args.problem)
    prob = parsed.problem
    x = _start_point(args, prob.d)
    if not 0 <= args.t0 < prob.T:
        raise InvalidConfigError("t0", "must lie in [0, T)")
    grid = sde.TimeGrid.uniform(args.t0, prob.T, args.steps)
    paths = sde.simulate_paths(prob.coeffs, args.t0, x, grid, args.paths, base_seed=args.seed,
                               domain=prob.domain)
    try:
        rx = sde.moment_bound_report_X_J(paths, prob.coeffs)
        rz = z_moment_report(paths, prob.coeffs, args.t0)
    except InvalidArgumentError as exc:
        raise InvalidConfigError("paths", str(exc)) from None
    rows = []
    offset = rx.s.size - rz.s.size
    for k, s in enumerate(rx.s):
        row = {"s": s}
        row.update({key: col[k] for key, col in rx.columns.items()})
        j = k - offset
        for key in rz.columns:
            row[key] = rz.columns[key][j] if j >= 0 else float("nan")
        row["pass"] = bool(rx.passed[k] and (j < 0 or rz.passed[j]))
        rows.append(row)
    cols = ["s"] + list(rx.columns) + list(rz.columns) + ["pass"]
    chash = config_hash(parsed.canonical, {"cmd": "verify moments", "t0": args.t0, "x": x.tolist(),
                                           "paths": args.paths, "steps": args.steps})
    write_csv(args.out, cols, rows, chash, args.seed)
    ok = all(r["pass"] for r in rows)
    print(f"moment bounds {'respected' if ok else 'VIOLATED'} at {len(rows)} nodes; report written to {args.out}")
    return EXIT_OK if ok else 1


def cmd_bench(args):
    names = ver.BENCHMARKS if args.names == "all" else [n.strip() for n in args.names.split(",") if n.strip()]
    mc = _mc(args)
    rows = []
    for name in names:
        try:
            b = ver.benchmark(name)
        except InvalidArgumentError as exc:
            raise InvalidConfigError("names", str(exc)) from None
        try:
            vf, diag = picard.solve(b.problem, mc, tol=args.tol, max_iters=args.sweeps, workers=args.workers)
        except (FailedSweepError, DivergingIterationError) as exc:
            _write_failure(args, exc, getattr(exc, "diagnostics", None), config_hash({"bench": name}))
            return EXIT_RUN
        rep = ver.compare_to_reference(vf, b.reference, x_box=b.x_box)
        rows.append({"benchmark": name, "dimension": b.problem.d, "sweeps": diag.iterations,
                     "lambda": diag.lam, "c_V": diag.c_V, "last_distance": diag.distances[-1],
                     "sup_value": rep.sup_value, "sup_gradient": rep.sup_gradient,
                     "rms_value": rep.rms_value, "rms_gradient": rep.rms_gradient,
                     "weighted_error": rep.weighted})
        log.info("benchmark %s done", name)
    cols = ["benchmark", "dimension", "sweeps", "lambda", "c_V", "last_distance", "sup_value",
            "sup_gradient", "rms_value", "rms_gradient", "weighted_error"]
    chash = config_hash({"cmd": "bench", "names": list(names), "paths": args.paths, "steps": args.steps,
                         "sweeps": args.sweeps, "tol": args.tol})
    write_csv(args.out_csv, cols, rows, chash, args.seed)
    with open(args.out_md, "w", encoding="utf-8") as fh:
        fh.write("# Benchmark report\n\n")
        fh.write(f"config_hash `{chash}`, seed {args.seed}, {args.paths} paths/node, {args.steps} steps\n\n")
        fh.write("| " + " | ".join(cols) + " |\n")
        fh.write("|" + "---|" * len(cols) + "\n")
        for r in rows:
            fh.write("| " + " | ".join(fmt(r[c]) if not isinstance(r[c], float) else f"{r[c]:.4g}"
                                       for c in cols) + " |\n")
    print(f"{len(rows)} benchmarks; reports written to {args.out_md} and {args.out_csv}")
    return EXIT_OK


def random_grid_pair(problem, rng, scale=1.0):
    """Two random grids on the problem's nodes, sized like the Lyapunov weight."""
    base = problem.zero_grid()
    pts = base.space_points()
    Vx = problem.V(0.0, pts).reshape(base.n_space)[None, ..., None]
    out = []
    for _ in range(2):
        vals = scale * rng.standard_normal(base.values.shape) * Vx
        out.append(base.with_values(vals))
    return out


def cmd_probe_contraction(args):
    parsed = load_problem(args.problem)
    prob = parsed.problem
    mc = _mc(args)
    lam = _lambda_arg(args.lam)
    if prob.c_V is None:
        prob.c_V = picard.estimate_c_V(prob, mc)
    if lam is None:
        if not prob.L > 0:
            raise InvalidConfigError("nonlinearity.L", "automatic lambda needs L > 0")
        lam = picard.lambda_star(prob.c_V, prob.L)
    g = np.random.default_rng([args.seed, 7])
    rows = []
    for k in range(args.pairs):
        w1, w2 = random_grid_pair(prob, g)
        try:
            res = picard.contraction_probe(prob, w1, w2, lam, mc, workers=args.workers)
        except (FailedSweepError, DivergingIterationError) as exc:
            _write_failure(args, exc, None, config_hash(parsed.canonical))
            return EXIT_RUN
        limit = 0.5 + 3.0 * res.noise
        rows.append({"pair": k, "lambda": lam, "c_V": prob.c_V, "ratio": res.ratio, "noise": res.noise,
                     "guaranteed": res.guaranteed, "limit": limit, "pass": res.ratio <= limit})
    cols = ["pair", "lambda", "c_V", "ratio", "noise", "guaranteed", "limit", "pass"]
    chash = config_hash(parsed.canonical, {"cmd": "probe contraction", "paths": args.paths,
                                           "steps": args.steps, "lambda": args.lam, "pairs": args.pairs})
    write_csv(args.out, cols, rows, chash, args.seed)
    ok = all(r["pass"] for r in rows)
    print(f"contraction {'confirmed' if ok else 'NOT confirmed'} on {len(rows)} pairs; "
          f"max ratio {max(r['ratio'] for r in rows):.4g}; report written to {args.out}")
    return EXIT_OK if ok else 1


# -- argument parsing ----------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=None,
                        help=f"worker threads (default: ${picard.WORKERS_ENV} or 1)")
    common.add_argument("--log-level", default="WARNING")
    common.add_argument("--out-failure", default="sfpe-failure.json",
                        help="diagnostics file written when a run fails (exit 3)")
    p = argparse.ArgumentParser(prog="sfpe", description="Monte-Carlo Picard solver for stochastic fixed-point equations")
    sub = p.add_subparsers(dest="command", required=True)

    def add_parser(subs, name, **kw):
        return subs.add_parser(name, parents=[common], **kw)

    def mc_flags(sp, paths, steps=50):
        sp.add_argument("--paths", type=int, default=paths)
        sp.add_argument("--steps", type=int, default=steps)
        sp.add_argument("--seed", type=int, default=0)

    sp = add_parser(sub, "simulate", help="simulate paths and report per-node moments")
    sp.add_argument("--problem", required=True)
    sp.add_argument("--t0", type=float, default=0.0)
    sp.add_argument("--x", default="0", help="start point, comma separated")
    mc_flags(sp, 100)
    sp.add_argument("--out", default="paths.csv")
    sp.set_defaults(func=cmd_simulate)

    sp = add_parser(sub, "solve", help="Picard iteration on a problem file")
    sp.add_argument("--problem", required=True)
    mc_flags(sp, 2000)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--max-iters", type=int, default=20)
    sp.add_argument("--lambda", dest="lam", default="auto")
    sp.add_argument("--out-grid", default="solution.grid")
    sp.add_argument("--out-diag", default=None)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("verify", help="oracle checks")
    vsub = sp.add_subparsers(dest="what", required=True)
    vp = add_parser(vsub, "integrals", help="closed-form singular integrals against quadrature")
    vp.add_argument("--n", type=int, default=1000)
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--out", default="integrals.csv")
    vp.set_defaults(func=cmd_verify_integrals)
    vp = add_parser(vsub, "moments", help="empirical moments against a-priori bounds")
    vp.add_argument("--problem", required=True)
    vp.add_argument("--t0", type=float, default=0.0)
    vp.add_argument("--x", default="0")
    mc_flags(vp, 10000)
    vp.add_argument("--out", default="moments.csv")
    vp.set_defaults(func=cmd_verify_moments)

    sp = add_parser(sub, "bench", help="run the benchmark suite")
    sp.add_argument("--names", default="identity,heat_square,sine_free,sine")
    mc_flags(sp, 2000)
    sp.add_argument("--sweeps", type=int, default=6)
    sp.add_argument("--tol", type=float, default=1e-12)
    sp.add_argument("--out-md", default="bench.md")
    sp.add_argument("--out-csv", default="bench.csv")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("probe", help="contraction diagnostics")
    psub = sp.add_subparsers(dest="what", required=True)
    pp = add_parser(psub, "contraction", help="|Phi w1 - Phi w2| / |w1 - w2| on random grid pairs")
    pp.add_argument("--problem", required=True)
    pp.add_argument("--lambda", dest="lam", default="auto")
    pp.add_argument("--pairs", type=int, default=5)
    mc_flags(pp, 2000)
    pp.add_argument("--out", default="contraction.csv")
    pp.set_defaults(func=cmd_probe_contraction)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidConfigError as exc:
        print(json.dumps({"error": "invalid_config", "field": exc.field, "message": exc.detail}), file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgumentError as exc:
        print(json.dumps({"error": "invalid_argument", "field": None, "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
