import numpy as np
import pytest
from hypothesis import given, strategies as st

from cql.errors import ContractError, InputError
from cql.simulate import (Scenario, ar_covariance, count_tp_fp, generate_data, marginal_f, model_error,
                          n_workers, parse_method, run_rep, run_scenario, screen_marginal)
from cql.solver import Dataset

BETA = [(1, 3), (2, 1.5), (5, 2)]


def _sc(**kw):
    base = dict(n=60, p=8, beta_star=BETA, dist="de", methods=["l1"], reps=3, seed=11)
    base.update(kw)
    return Scenario(**base)


def test_independent_design():
    d, _ = generate_data(_sc(n=100_000, p=3, rho=0.0, beta_star=[(1, 1)]), 0)
    C = np.cov(d.X, rowvar=False)
    assert np.abs(C - np.eye(3)).max() <= 0.02


def test_ar_design():
    d, _ = generate_data(_sc(n=100_000, p=3, rho=0.5, beta_star=[(1, 1)]), 0)
    C = np.cov(d.X, rowvar=False)
    assert C[0, 2] == pytest.approx(0.25, abs=0.02)
    assert np.abs(C - ar_covariance(3, 0.5)).max() <= 0.02


def test_generate_deterministic():
    sc = _sc()
    a, b = generate_data(sc, 2), generate_data(sc, 2)
    assert np.array_equal(a[0].X, b[0].X) and np.array_equal(a[0].y, b[0].y)
    c = generate_data(sc, 3)
    assert not np.array_equal(a[0].y, c[0].y)


def test_generate_response():
    sc = _sc(n=20000, dist="normal")
    d, beta = generate_data(sc, 0)
    e = d.y - d.X @ beta
    assert e.std() == pytest.approx(1.0, abs=0.03)
    assert np.array_equal(beta, sc.beta)


def test_model_error_examples():
    b = np.array([3, 1.5, 0, 0, 2.0])
    assert model_error(b, b, 0.5) == 0.0
    assert model_error(np.r_[1.0, 0, 0], np.zeros(3), 0.0) == pytest.approx(1.0)
    assert model_error(np.r_[1.0, 1, 0], np.zeros(3), 0.5) == pytest.approx(3.0)
    with pytest.raises(Exception):
        model_error(np.zeros(3), np.zeros(4), 0.5)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(0, 0.95))
def test_model_error_nonnegative(delta, rho):
    d = np.asarray(delta)
    me = model_error(d, np.zeros_like(d), rho)
    assert me >= -1e-12
    assert me == pytest.approx(d @ ar_covariance(len(d), rho) @ d, rel=1e-12, abs=1e-12)


def test_tp_fp_examples():
    bs = np.zeros(12)
    bs[[0, 1, 4]] = [3, 1.5, 2]
    assert count_tp_fp(bs, bs) == (3, 0)
    assert count_tp_fp(np.zeros(12), bs) == (0, 0)
    bh = bs.copy()
    bh[1] = 0
    bh[2] = 1e-12
    bh[3] = 0.2
    assert count_tp_fp(bh, bs) == (2, 1)


@given(st.lists(st.floats(-1, 1), min_size=12, max_size=12))
def test_tp_fp_bounds(vals):
    bs = np.zeros(12)
    bs[[0, 1, 4]] = 1
    tp, fp = count_tp_fp(np.asarray(vals), bs)
    assert 0 <= tp <= 3 and 0 <= fp <= 9


def test_screen_examples():
    rng = np.random.default_rng(4)
    y = rng.standard_normal(50)
    X = np.column_stack([rng.standard_normal(50), y, rng.standard_normal(50)])
    d = Dataset(X, y)
    assert screen_marginal(d, 1)[0] == 1
    order = screen_marginal(d, 3)
    assert sorted(order) == [0, 1, 2]
    F = marginal_f(d)
    assert np.all(np.diff(F[order]) <= 0)
    X2 = np.column_stack([y + 0.1 * rng.standard_normal(50), rng.standard_normal(50)])
    assert list(screen_marginal(Dataset(X2, y), 1)) == [0]


def test_screen_f_statistic_formula():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((40, 3))
    y = X[:, 0] + rng.standard_normal(40)
    F = marginal_f(Dataset(X, y))
    for j in range(3):
        r2 = np.corrcoef(X[:, j], y)[0, 1] ** 2
        assert F[j] == pytest.approx(38 * r2 / (1 - r2), rel=1e-9)


def test_screen_ties_and_bounds():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(30)
    y = x + rng.standard_normal(30)
    d = Dataset(np.column_stack([x, x, x]), y)
    assert list(screen_marginal(d, 3)) == [0, 1, 2]
    with pytest.raises(ContractError):
        screen_marginal(d, 0)
    with pytest.raises(ContractError):
        screen_marginal(d, 4)


def test_scenario_validation():
    with pytest.raises(InputError):
        _sc(beta_star=[(13, 1.0)], p=12)
    with pytest.raises(InputError):
        _sc(rho=1.0)
    with pytest.raises(InputError):
        _sc(reps=0)
    with pytest.raises(InputError):
        _sc(methods=["ridge"])
    sc = _sc(methods=["WCQR+(5)", "ecqr", "l1l2+"])
    assert sc.methods == ("wcqr+5", "ecqr9", "l1l2+")


def test_parse_method():
    assert parse_method("wcqr(19)").K == 19
    assert parse_method("lasso").basis.K == 1
    assert parse_method("l1l2").one_step and not parse_method("l1l2+").one_step
    with pytest.raises(InputError):
        parse_method("l1(3)")


def test_single_rep_mme_is_its_model_error():
    sc = _sc(reps=1, methods=["l1", "lasso"])
    res = run_scenario(sc)
    rep = res.reps[0]
    for m in sc.methods:
        assert res.summaries[m].mme == rep.outcomes[m].model_error
        assert res.summaries[m].n_ok == 1


def test_rep_outcomes_consistent():
    sc = _sc(methods=["wcqr+5", "wcqr5", "ecqr5", "lasso"], reps=1)
    rep = run_rep(sc, 0)
    for m, o in rep.outcomes.items():
        assert not o.failed, o.error
        tp, fp = count_tp_fp(o.beta, sc.beta)
        assert (o.tp, o.fp) == (tp, fp)
        assert o.model_error == pytest.approx(model_error(o.beta, sc.beta, sc.rho))
        assert o.oracle_model_error >= 0


def test_worker_count_invariance():
    sc = _sc(reps=3, methods=["l1", "wcqr+3"])
    a = run_scenario(sc, workers=1)
    b = run_scenario(sc, workers=3)
    assert a.table_rows() == b.table_rows()
    assert a.per_rep_rows() == b.per_rep_rows()


def test_n_workers_env(monkeypatch):
    monkeypatch.setenv("CQL_THREADS", "4")
    assert n_workers() == 4
    monkeypatch.setenv("CQL_THREADS", "zero")
    with pytest.raises(InputError):
        n_workers()


def test_l1_de_scenario_mme():
    sc = Scenario(n=100, p=12, beta_star=BETA, dist="de", methods=["l1"], reps=30, seed=101, oracle=False)
    s = run_scenario(sc).summaries["l1"]
    assert s.mean_tp == 3.0
    assert 0.5 * 0.035 <= s.mme <= 2 * 0.035
