import csv
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sfpe import cli, picard
from sfpe.config import InvalidConfigError, config_hash, parse_problem_text
from sfpe.value import load_grid

PROBLEMS = Path(__file__).resolve().parents[1] / "demos" / "problems"

BASE = """
[problem]
T = 1.0

[coefficients]
kind = brownian

[grid]
box_lo = -2
box_hi = 2
n_space = 5
n_time = 3

[terminal]
kind = identity

[nonlinearity]
kind = zero
L = 0
"""


def edit(text, old, new):
    assert old in text
    return text.replace(old, new)


def run(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return cli.main(argv)


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        head = fh.readline()
        rows = list(csv.DictReader(fh))
    return head, rows


# -- config parsing --------------------------------------------------------------------

def test_parse_minimal_problem():
    parsed = parse_problem_text(BASE)
    prob = parsed.problem
    assert prob.d == 1 and prob.T == 1.0 and prob.L == 0.0
    assert prob.delta_T == pytest.approx(0.02)
    x = np.array([[0.5], [-1.0]])
    np.testing.assert_array_equal(prob.g(x), [0.5, -1.0])
    assert parsed.reference is None


def test_parse_manufactured_problem_has_reference():
    parsed = parse_problem_text((PROBLEMS / "sine.ini").read_text())
    assert parsed.reference is not None
    assert parsed.problem.L == 0.5
    x = np.linspace(-3, 3, 7)[:, None]
    np.testing.assert_allclose(parsed.problem.g(x), np.sin(x[:, 0]), rtol=1e-15)


@pytest.mark.parametrize("old, new, field", [
    ("L = 0\n", "", "nonlinearity.L"),
    ("T = 1.0", "T = -1", "problem.T"),
    ("T = 1.0", "T = one", "problem.T"),
    ("kind = brownian", "kind = levy", "coefficients.kind"),
    ("box_hi = 2", "box_hi = -3", "grid"),
    ("kind = zero", "kind = linear\nell_z = 2.0", "nonlinearity.L"),
])
def test_invalid_configs_name_the_field(old, new, field):
    with pytest.raises(InvalidConfigError) as info:
        parse_problem_text(edit(BASE, old, new))
    assert info.value.field.startswith(field)


def test_keys_are_case_sensitive_and_comments_allowed():
    text = edit(BASE, "T = 1.0", "T = 2.0   # horizon")
    assert parse_problem_text(text).problem.T == 2.0
    with pytest.raises(InvalidConfigError):
        parse_problem_text(edit(BASE, "T = 1.0", "t = 1.0"))


def test_config_hash_is_canonical():
    a = config_hash({"x": 1.0, "y": [1, 2]}, {"z": "s"})
    b = config_hash({"y": [1, 2], "x": 1.0}, {"z": "s"})
    assert a == b and len(a) == 64
    assert a != config_hash({"x": 1.5, "y": [1, 2]}, {"z": "s"})
    p1 = parse_problem_text(BASE).canonical
    p2 = parse_problem_text(edit(BASE, "T = 1.0", "T = 1.0  # same")).canonical
    assert config_hash(p1) == config_hash(p2)


# -- CLI --------------------------------------------------------------------------------

def test_missing_L_exits_2_naming_field(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(edit(BASE, "L = 0\n", ""))
    assert run(["solve", "--problem", str(bad)], tmp_path, monkeypatch) == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "invalid_config" and record["field"] == "nonlinearity.L"


def test_missing_file_exits_2(tmp_path, monkeypatch, capsys):
    assert run(["solve", "--problem", str(tmp_path / "nope.ini")], tmp_path, monkeypatch) == 2
    assert json.loads(capsys.readouterr().err)["field"] == "problem"


def test_verify_integrals_all_rows_pass(tmp_path, monkeypatch):
    assert run(["verify", "integrals", "--out", "i.csv"], tmp_path, monkeypatch) == 0
    head, rows = read_csv(tmp_path / "i.csv")
    assert head.startswith("# config_hash=") and "seed=0" in head
    assert len(rows) == 1000 and all(r["pass"] == "true" for r in rows)


def _solve(tmp_path, monkeypatch, tag, workers, seed=42):
    argv = ["solve", "--problem", str(PROBLEMS / "identity.ini"), "--paths", "300", "--steps", "10",
            "--seed", str(seed), "--out-grid", f"{tag}.grid", "--out-diag", f"{tag}.csv",
            "--workers", str(workers)]
    assert run(argv, tmp_path, monkeypatch) == 0
    return (tmp_path / f"{tag}.grid").read_bytes(), (tmp_path / f"{tag}.csv").read_bytes()


def test_solve_byte_identical_across_runs_and_workers(tmp_path, monkeypatch):
    a = _solve(tmp_path, monkeypatch, "a", 1)
    b = _solve(tmp_path, monkeypatch, "b", 1)
    c = _solve(tmp_path, monkeypatch, "c", 8)
    assert a == b == c
    other = _solve(tmp_path, monkeypatch, "d", 1, seed=43)
    assert other[0] != a[0]
    vf = load_grid(tmp_path / "a.grid")
    # identity problem: value x and gradient 1 up to Monte-Carlo error
    pts = vf.space_points()[:, 0]
    assert np.all(np.abs(vf.values[..., 0] - pts) <= 4 * vf.stderr[..., 0] + 1e-12)


def test_solve_workers_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(picard.WORKERS_ENV, "3")
    assert picard.resolve_workers(None) == 3
    assert picard.resolve_workers(2) == 2
    a = _solve(tmp_path, monkeypatch, "env", 1)
    monkeypatch.delenv(picard.WORKERS_ENV)
    assert a == _solve(tmp_path, monkeypatch, "noenv", 1)


def test_failed_sweep_exits_3_with_diagnostics(tmp_path, monkeypatch, capsys):
    argv = ["solve", "--problem", str(PROBLEMS / "leaves_domain.ini"), "--paths", "200", "--steps", "10",
            "--out-failure", "fail.json"]
    assert run(argv, tmp_path, monkeypatch) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FailedSweepError" and err["diagnostics"] == "fail.json"
    record = json.loads((tmp_path / "fail.json").read_text())
    assert record["diverged_fraction"] > 1e-3 and len(record["config_hash"]) == 64


def test_diverging_iteration_exits_3(tmp_path, monkeypatch):
    # f = 50 v_1 with lambda = 0: the Picard iterates grow like 50^k / k! for many sweeps
    text = edit(BASE, "kind = zero\nL = 0", "kind = linear\nell_y = 50\nL = 50") + "\n[lyapunov]\nc_V = 1.0\n"
    path = tmp_path / "grow.ini"
    path.write_text(text)
    argv = ["solve", "--problem", str(path), "--paths", "100", "--steps", "10", "--lambda", "0",
            "--tol", "1e-300", "--max-iters", "10", "--out-failure", "grow.json"]
    assert run(argv, tmp_path, monkeypatch) == 3
    record = json.loads((tmp_path / "grow.json").read_text())
    assert record["error"] == "DivergingIterationError"
    assert len(record["sweeps"]) >= 4


def test_simulate_csv_layout(tmp_path, monkeypatch):
    argv = ["simulate", "--problem", str(PROBLEMS / "ou.ini"), "--x", "0.5,-0.5", "--paths", "3",
            "--steps", "4", "--out", "s.csv"]
    assert run(argv, tmp_path, monkeypatch) == 0
    head, rows = read_csv(tmp_path / "s.csv")
    assert len(rows) == 3 * 5
    assert list(rows[0]) == ["path_id", "s", "X_1", "X_2", "J_11", "J_12", "J_21", "J_22", "diverged"]
    assert float(rows[0]["X_1"]) == 0.5 and float(rows[1]["J_11"]) == 0.75


def test_simulate_rejects_wrong_dimension(tmp_path, monkeypatch, capsys):
    argv = ["simulate", "--problem", str(PROBLEMS / "ou.ini"), "--x", "1,2,3"]
    assert run(argv, tmp_path, monkeypatch) == 2
    assert json.loads(capsys.readouterr().err)["field"] == "x"


def test_verify_moments_passes_on_ou(tmp_path, monkeypatch):
    argv = ["verify", "moments", "--problem", str(PROBLEMS / "ou.ini"), "--x", "0.5,-0.5",
            "--paths", "2000", "--steps", "20", "--out", "m.csv"]
    assert run(argv, tmp_path, monkeypatch) == 0
    head, rows = read_csv(tmp_path / "m.csv")
    assert head.startswith("# config_hash=") and all(r["pass"] == "true" for r in rows)


def test_probe_contraction_on_sine(tmp_path, monkeypatch):
    argv = ["probe", "contraction", "--problem", str(PROBLEMS / "sine.ini"), "--pairs", "2",
            "--paths", "200", "--steps", "10", "--out", "p.csv"]
    assert run(argv, tmp_path, monkeypatch) == 0
    head, rows = read_csv(tmp_path / "p.csv")
    assert len(rows) == 2
    for r in rows:
        assert float(r["ratio"]) <= 0.5 + 3 * float(r["noise"])
        assert float(r["lambda"]) == pytest.approx(float(r["c_V"]) ** 2 * 0.25 * math.pi ** 3, rel=1e-12)


def test_bench_writes_markdown_and_csv(tmp_path, monkeypatch):
    argv = ["bench", "--names", "identity,sine_free", "--paths", "200", "--steps", "10", "--sweeps", "2",
            "--out-md", "b.md", "--out-csv", "b.csv"]
    assert run(argv, tmp_path, monkeypatch) == 0
    md = (tmp_path / "b.md").read_text()
    assert "| identity |" in md and "| sine_free |" in md
    head, rows = read_csv(tmp_path / "b.csv")
    assert [r["benchmark"] for r in rows] == ["identity", "sine_free"]


def test_bench_unknown_name_exits_2(tmp_path, monkeypatch):
    assert run(["bench", "--names", "nope"], tmp_path, monkeypatch) == 2


def test_python_dash_m_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "sfpe", "verify", "integrals", "--n", "20", "--out",
                          str(tmp_path / "i.csv")], capture_output=True, text=True, check=False)
    assert out.returncode == 0, out.stderr
    assert "20/20" in out.stdout
