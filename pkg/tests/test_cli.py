import csv
import io
import json

import numpy as np
import pytest

from cql.cli import (EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, emit_csv_table, format_cell, load_csv_dataset,
                     load_scenario, main, parse_basis, scenario_from_dict)
from cql.distributions import CATALOG
from cql.errors import InputError

SCENARIO = {"n": 100, "p": 12, "beta_star": [[1, 3], [2, 1.5], [5, 2]], "dist": "de",
            "methods": ["l1"], "seed": 1}


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def _dataset_csv(path, n=40, p=4, seed=0, response=None):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = X[:, 0] * 2 - X[:, 2] + rng.laplace(size=n) if response is None else np.full(n, response)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y"] + [f"x{j + 1}" for j in range(p)])
        for yi, xi in zip(y, X):
            w.writerow([repr(float(yi))] + [repr(float(v)) for v in xi])
    return path, X, y


# -- loading -----------------------------------------------------------------

def test_three_row_file(tmp_path):
    p = _write(tmp_path / "d.csv", "y,x1,x2\n1,2,3\n4,5,6.5\n7,8,9\n")
    d = load_csv_dataset(p, "y")
    assert (d.n, d.p) == (3, 2)
    assert np.array_equal(d.y, [1, 4, 7])
    assert np.array_equal(d.X[:, 1], [3, 6.5, 9])


def test_response_in_middle(tmp_path):
    p = _write(tmp_path / "d.csv", "x1,y,x2\n1,2,3\n4,5,6\n")
    d = load_csv_dataset(p, "y")
    assert np.array_equal(d.y, [2, 5]) and np.array_equal(d.X, [[1, 3], [4, 6]])


def test_missing_column(tmp_path):
    p = _write(tmp_path / "d.csv", "y,x1,x2\n1,2,3\n4,5,6\n")
    with pytest.raises(InputError, match="column z not found"):
        load_csv_dataset(p, "z")


def test_non_numeric_cell(tmp_path):
    p = _write(tmp_path / "d.csv", "y,x1,x2\n1,NA,3\n4,5,6\n")
    with pytest.raises(InputError, match="row 2, column x1"):
        load_csv_dataset(p, "y")


def test_ragged_rows(tmp_path):
    p = _write(tmp_path / "d.csv", "y,x1,x2\n1,2,3\n4,5\n")
    with pytest.raises(InputError, match="row 3"):
        load_csv_dataset(p, "y")


def test_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((6, 2))
    y = rng.standard_normal(6)
    path = tmp_path / "rt.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "a", "b"])
        for yi, xi in zip(y, X):
            w.writerow([repr(float(yi))] + [repr(float(v)) for v in xi])
    d = load_csv_dataset(path, "y")
    assert np.array_equal(d.X, X) and np.array_equal(d.y, y)


def test_round_trip_at_printed_precision(tmp_path):
    vals = np.array([[0.125, 1.5], [2.25, -3.0], [1e-3, 4.0]])
    emit_csv_table([dict(y=v[0], x=v[1]) for v in vals], tmp_path / "o.csv")
    d = load_csv_dataset(tmp_path / "o.csv", "y")
    assert np.array_equal(d.y, vals[:, 0]) and np.array_equal(d.X[:, 0], vals[:, 1])


# -- scenarios ---------------------------------------------------------------

def test_scenario_defaults(tmp_path):
    p = _write(tmp_path / "s.json", json.dumps(SCENARIO))
    sc = load_scenario(p)
    assert (sc.cv_folds, sc.rho, sc.reps) == (5, 0.5, 100)
    assert np.array_equal(sc.beta[[0, 1, 4]], [3, 1.5, 2]) and np.count_nonzero(sc.beta) == 3
    assert sc.dist.kind == "de" and sc.seed == 1


def test_scenario_unknown_dist():
    with pytest.raises(InputError) as e:
        scenario_from_dict({"dist": "cauchy"})
    for name in CATALOG:
        assert name in str(e.value)


def test_scenario_bad_index():
    with pytest.raises(InputError, match="out of range"):
        scenario_from_dict({**SCENARIO, "beta_star": [[13, 1.0]]})


def test_scenario_unknown_key():
    with pytest.raises(InputError, match="unknown scenario keys"):
        scenario_from_dict({**SCENARIO, "rhoo": 0.3})


def test_scenario_normal_sigma():
    sc = scenario_from_dict({**SCENARIO, "dist": {"name": "normal", "sigma": 3.0}})
    assert sc.dist.variance == pytest.approx(9.0)


# -- output ------------------------------------------------------------------

def test_format_cell():
    assert format_cell(0.6366197) == "0.636620"
    assert format_cell(3) == "3"
    assert format_cell(1.0) == "1.00000"
    assert format_cell(True) == "true"
    assert format_cell(None) == ""


def test_empty_table(tmp_path):
    emit_csv_table([], tmp_path / "e.csv", ["rep", "method", "model_error"])
    assert (tmp_path / "e.csv").read_bytes() == b"rep,method,model_error\n"


def test_csv_lf_and_quoting(tmp_path):
    emit_csv_table([{"a": "x,y", "b": 0.5}], tmp_path / "q.csv")
    assert (tmp_path / "q.csv").read_bytes() == b'a,b\n"x,y",0.500000\n'


def test_stdout_echo(capsys):
    emit_csv_table([{"a": 1}], "-")
    assert capsys.readouterr().out == "a\n1\n"


def test_unwritable_path(tmp_path):
    with pytest.raises(InputError):
        emit_csv_table([{"a": 1}], tmp_path / "missing" / "x.csv")


def test_parse_basis():
    assert parse_basis("cqr9").K == 9
    assert [c.kind for c in parse_basis("l1l2")] == ["absolute", "squared"]
    with pytest.raises(InputError):
        parse_basis("huber")


# -- subcommands -------------------------------------------------------------

def test_fit_json(tmp_path, capsys):
    data, X, y = _dataset_csv(tmp_path / "d.csv")
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", str(data), "--response", "y", "--basis", "cqr5", "--out", str(out)]) == EXIT_OK
    res = json.loads(out.read_text())
    assert len(res["beta"]) == 4 and res["columns"] == ["x1", "x2", "x3", "x4"]
    assert {0, 2} <= set(res["active_set"])
    assert res["converged"]


def test_fit_full_precision(tmp_path):
    data, _, _ = _dataset_csv(tmp_path / "d.csv")
    out = tmp_path / "fit.json"
    main(["fit", "--data", str(data), "--response", "y", "--basis", "l1l2", "--lambda", "0.05",
          "--out", str(out)])
    raw = json.loads(out.read_text())["beta"]
    assert all(float(repr(v)) == v for v in raw)


def test_weights_csv(tmp_path):
    data, _, _ = _dataset_csv(tmp_path / "d.csv", n=80)
    out = tmp_path / "w.csv"
    assert main(["weights", "--data", str(data), "--response", "y", "--basis", "cqr3", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["component"] for r in rows] == ["tau=0.25", "tau=0.5", "tau=0.75"]
    assert {"a", "weight", "M1", "M2", "M3"} <= set(rows[0])


def test_efficiency_table_cli(tmp_path):
    out = tmp_path / "t1.csv"
    assert main(["efficiency", "--dists", "de,normal", "--methods", "L1,L2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    got = {(r["dist"], r["method"]): r["efficiency"] for r in rows}
    assert got[("normal", "L1")] == "0.636620"
    assert got[("de", "L2")] == "0.500000"


def test_efficiency_weights_cli(tmp_path):
    out = tmp_path / "t2.csv"
    assert main(["efficiency", "--dists", "de", "--weights", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 9 and float(rows[4]["weight"]) == pytest.approx(1.0, abs=1e-6)


def test_simulate_cli(tmp_path):
    sc = _write(tmp_path / "s.json", json.dumps({**SCENARIO, "n": 50, "p": 6, "reps": 2, "methods": ["l1", "lasso"]}))
    out, per = tmp_path / "t3.csv", tmp_path / "reps.csv"
    assert main(["simulate", "--scenario", str(sc), "--out", str(out), "--per-rep", str(per)]) == 0
    head = per.read_text().splitlines()
    assert head[0] == "rep,method,model_error" and len(head) == 1 + 2 * 2
    assert out.read_text().splitlines()[0].startswith("method,mme,oracle_mme")


def test_screen_cli(tmp_path):
    data, _, _ = _dataset_csv(tmp_path / "d.csv")
    out = tmp_path / "sc.csv"
    assert main(["screen", "--data", str(data), "--response", "y", "--keep", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["column"] for r in rows] == ["x1", "x3"]


def test_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path / "bad.csv", "y,x1\n1,2\n")
    assert main(["fit", "--data", str(bad), "--response", "z"]) == EXIT_INPUT
    assert "column z not found" in capsys.readouterr().err
    assert main(["simulate", "--scenario", str(_write(tmp_path / "c.json", '{"dist": "cauchy"}'))]) == EXIT_INPUT
    zero, _, _ = _dataset_csv(tmp_path / "z.csv", n=30, response=0.0)
    assert main(["weights", "--data", str(zero), "--response", "y", "--basis", "cqr3"]) == EXIT_NUMERICAL
    with pytest.raises(SystemExit) as e:
        main(["fit"])
    assert e.value.code == 2
