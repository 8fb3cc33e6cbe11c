"""Command-line entry point: ``cql fit | weights | efficiency | simulate | screen``.

Human-readable tables go to stdout; machine-readable CSV/JSON go behind
``--out``.  Exit codes: 0 success, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import re
import sys

import numpy as np

from .adapt import (covariance_estimate, estimate_moments, optimal_weights, two_step_fit)
from .distributions import CATALOG, ErrorDistribution
from .efficiency import K_METHODS, METHODS, efficiency_table, weight_table
from .errors import ContractError, InputError, NumericalError
from .losses import LossBasis
from .penalty import PenaltyRule, PenaltyVector
from .simulate import PER_REP_COLUMNS, SUMMARY_COLUMNS, Scenario, marginal_f, run_scenario, screen_marginal
from .solver import LASSO, Dataset, SolverOptions, cross_validate, fit_composite, lambda_grid, lambda_max

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3

SCENARIO_KEYS = {"n", "p", "beta_star", "rho", "dist", "sigma", "methods", "reps", "cv_folds",
                 "lambda_grid", "seed", "n_lambda", "cv_loss", "oracle"}


# --------------------------------------------------------------------------
# file I/O

def load_csv_dataset(path, response_column: str) -> Dataset:
    """Read a headed numeric CSV; the response column is pulled out, the rest is X in header order."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror or e}")
    except UnicodeDecodeError:
        raise InputError(f"{path} is not valid UTF-8")
    if not rows:
        raise InputError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if response_column not in header:
        raise InputError(f"column {response_column} not found")
    if len(set(header)) != len(header):
        raise InputError(f"{path} has repeated column names")
    body = rows[1:]
    vals = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        lineno = i + 2
        if len(row) != len(header):
            raise InputError(f"row {lineno} has {len(row)} fields, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise InputError(f"non-numeric value {cell!r} at row {lineno}, column {header[j]}")
            vals[i, j] = v
    if vals.shape[0] < 2:
        raise InputError(f"{path} needs at least two data rows")
    k = header.index(response_column)
    X = np.delete(vals, k, axis=1)
    if X.shape[1] == 0:
        raise InputError(f"{path} has no predictor columns")
    return Dataset(X, vals[:, k])


def predictor_names(path, response_column: str) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh))]
    return [h for h in header if h != response_column]


def load_scenario(path) -> Scenario:
    """JSON scenario; omitted keys default to rho=0.5, reps=100, cv_folds=5, seed=0."""
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror or e}")
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}")
    return scenario_from_dict(cfg)


def scenario_from_dict(cfg) -> Scenario:
    if not isinstance(cfg, dict):
        raise InputError("scenario must be a JSON object")
    unknown = sorted(set(cfg) - SCENARIO_KEYS)
    if unknown:
        raise InputError(f"unknown scenario keys: {', '.join(unknown)}")
    dist = cfg.get("dist")
    sigma = float(cfg.get("sigma", 1.0))
    if isinstance(dist, dict):
        sigma = float(dist.get("sigma", sigma))
        dist = dist.get("name")
    if not isinstance(dist, str):
        raise InputError(f"dist must name one of {', '.join(CATALOG)}")
    dist = ErrorDistribution(dist, sigma)
    if dist.kind not in CATALOG:
        raise InputError(f"unknown distribution {cfg['dist']!r}; expected one of {', '.join(CATALOG)}")
    missing = [k for k in ("n", "p", "beta_star", "methods") if k not in cfg]
    if missing:
        raise InputError(f"scenario is missing {', '.join(missing)}")
    methods = cfg["methods"]
    if isinstance(methods, str):
        methods = [methods]
    try:
        return Scenario(n=cfg["n"], p=cfg["p"], beta_star=cfg["beta_star"], dist=dist,
                        methods=tuple(methods), rho=cfg.get("rho", 0.5), reps=cfg.get("reps", 100),
                        cv_folds=cfg.get("cv_folds", 5), lambda_grid=cfg.get("lambda_grid"),
                        seed=cfg.get("seed", 0), n_lambda=cfg.get("n_lambda", 30),
                        cv_loss=cfg.get("cv_loss", "own"), oracle=bool(cfg.get("oracle", True)))
    except (TypeError, ValueError) as e:
        if isinstance(e, InputError):
            raise
        raise InputError(f"invalid scenario: {e}")


def format_cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), "#.6g")
    return str(x)


def emit_csv_table(rows, path, columns=None) -> None:
    """Write ``rows`` (dicts or sequences) as CSV with LF line ends; ``"-"`` is stdout."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows and isinstance(rows[0], dict) else None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if columns is not None:
        w.writerow(columns)
    width = None
    for r in rows:
        vals = [r.get(c) for c in columns] if isinstance(r, dict) else list(r)
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ContractError("rows are not rectangular")
        if columns is not None and len(vals) != len(columns):
            raise ContractError("row width does not match the header")
        w.writerow([format_cell(v) for v in vals])
    text = buf.getvalue()
    if str(path) == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise InputError(f"cannot write {path}: {e.strerror or e}")


def write_json(obj, path) -> None:
    # json renders floats with repr, i.e. the shortest string that round-trips exactly
    text = json.dumps(obj, indent=2, allow_nan=True) + "\n"
    if str(path) == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise InputError(f"cannot write {path}: {e.strerror or e}")


def print_table(rows, columns, out=None) -> None:
    out = out or sys.stdout
    cells = [[format_cell(r.get(c) if isinstance(r, dict) else r[i]) for i, c in enumerate(columns)]
             for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    out.write("  ".join(c.rjust(wd) for c, wd in zip(columns, widths)) + "\n")
    for row in cells:
        out.write("  ".join(v.rjust(wd) for v, wd in zip(row, widths)) + "\n")


# --------------------------------------------------------------------------
# argument helpers

def parse_basis(desc: str) -> LossBasis:
    s = desc.strip().lower().replace("-", "")
    if s in ("l1l2", "l1+l2"):
        return LossBasis.l1l2()
    if s in ("l1", "absolute", "lad"):
        return LossBasis.absolute()
    if s in ("l2", "squared", "ls"):
        return LossBasis.squared()
    m = re.fullmatch(r"cqr(\d+)", s)
    if m and int(m.group(1)) >= 1:
        return LossBasis.cqr(int(m.group(1)))
    raise InputError(f"unknown basis {desc!r}; expected cqrK, l1l2, l1 or l2")


def parse_int_list(s: str) -> list:
    try:
        out = [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"expected a comma-separated list of integers, got {s!r}")
    if not out or any(v < 1 for v in out):
        raise InputError(f"K values must be positive integers, got {s!r}")
    return out


def parse_dists(s: str, sigma: float) -> list:
    names = list(CATALOG) if s.strip().lower() == "all" else [v.strip() for v in s.split(",") if v.strip()]
    out = []
    for name in names:
        d = ErrorDistribution(name, sigma)
        if d.kind not in CATALOG:
            raise InputError(f"unknown distribution {name!r}; expected one of {', '.join(CATALOG)}")
        out.append(d)
    return out


def parse_methods(s: str) -> list:
    if s.strip().lower() == "all":
        return list(METHODS)
    lookup = {m.lower(): m for m in METHODS}
    out = []
    for v in s.split(","):
        key = v.strip().lower()
        if key not in lookup:
            raise InputError(f"unknown method {v!r}; expected one of {', '.join(METHODS)}")
        out.append(lookup[key])
    return out


def _basis_labels(basis: LossBasis) -> list:
    return [f"tau={c.tau:g}" if c.kind == "quantile" else c.kind for c in basis]


def _pilot_residuals(data, opts, folds, seed):
    grid = lambda_grid(lambda_max(data, LASSO, opts.standardize))
    lam = cross_validate(data, LASSO, grid, folds, seed, opts).lam
    fit = fit_composite(data, LossBasis.squared(), [1.0], PenaltyVector.lasso(data.p, lam), opts)
    return fit, lam


# --------------------------------------------------------------------------
# subcommands

def cmd_fit(args) -> int:
    data = load_csv_dataset(args.data, args.response)
    names = predictor_names(args.data, args.response)
    basis = parse_basis(args.basis)
    opts = SolverOptions(tol=args.tol, max_iter=args.max_iter)
    lam = None if args.lam == "auto" else _positive_float(args.lam, "--lambda")
    if args.penalty == "none":
        lam = 0.0
    # an unpenalized fit is a lasso refit at lambda = 0
    rule = PenaltyRule("lasso" if args.penalty == "none" else args.penalty, 1.0)
    res = two_step_fit(data, basis, rule, lam, opts, folds=args.folds, seed=args.seed,
                       cv_loss=args.cv_loss)
    fit, w = res.fit, res.weights
    sigma2 = float("nan")
    if fit.active_set.size:
        try:
            sigma2 = covariance_estimate(data, basis, w, fit).sigma2_w
        except NumericalError:
            pass
    print(f"basis {args.basis}, penalty {args.penalty}, lambda {res.lam:.6g} "
          f"(pilot lasso lambda {res.lasso_lam:.6g}), converged {fit.converged}")
    print_table([{"component": lab, "weight": wk} for lab, wk in zip(_basis_labels(basis), w.w)],
                ["component", "weight"])
    print_table([{"column": names[j], "beta": fit.beta[j]} for j in fit.active_set], ["column", "beta"])
    if args.out:
        write_json({
            "basis": args.basis, "penalty": args.penalty, "lambda": res.lam,
            "lasso_lambda": res.lasso_lam, "weights": w.w.tolist(),
            "components": _basis_labels(basis), "columns": names,
            "beta": fit.beta.tolist(), "offsets": np.asarray(fit.offsets).tolist(),
            "active_set": [int(j) for j in fit.active_set], "objective": fit.objective,
            "converged": bool(fit.converged), "iterations": int(fit.iterations),
            "sigma2_w": sigma2, "seed": args.seed,
        }, args.out)
    return EXIT_OK


def cmd_weights(args) -> int:
    data = load_csv_dataset(args.data, args.response)
    basis = parse_basis(args.basis)
    opts = SolverOptions()
    pilot, lam = _pilot_residuals(data, opts, args.folds, args.seed)
    m = estimate_moments(pilot.residuals, basis)
    w = optimal_weights(m, args.mode)
    rows = [{"component": lab, "a": m.a[k], "weight": w.w[k],
             **{f"M{l + 1}": m.M[k, l] for l in range(m.K)}}
            for k, lab in enumerate(_basis_labels(basis))]
    cols = ["component", "a", "weight"] + [f"M{l + 1}" for l in range(m.K)]
    print(f"pilot lasso lambda {lam:.6g}, bandwidth {m.bandwidth:.6g}, mode {args.mode}"
          + (" (regularized solve)" if w.regularized else ""))
    print_table(rows, ["component", "a", "weight"])
    if args.out:
        emit_csv_table(rows, args.out, cols)
    return EXIT_OK


def cmd_efficiency(args) -> int:
    dists = parse_dists(args.dists, args.sigma)
    if args.weights:
        K = parse_int_list(args.K)[0] if args.K else 9
        rows = weight_table(dists, K, args.mode)
        cols = ["dist", "tau", "weight"]
    else:
        rows = efficiency_table(dists, parse_methods(args.methods), parse_int_list(args.K or "3,5,9,19,29"))
        cols = ["dist", "method", "K", "sigma2", "efficiency"]
    print_table(rows, cols)
    if args.out:
        emit_csv_table(rows, args.out, cols)
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    if args.reps is not None:
        sc = Scenario(**{**vars(sc), "reps": args.reps})
    res = run_scenario(sc)
    rows = res.table_rows()
    print(f"n={sc.n} p={sc.p} dist={sc.dist.label} reps={sc.reps} seed={sc.seed}")
    print_table(rows, SUMMARY_COLUMNS)
    if args.out:
        emit_csv_table(rows, args.out, SUMMARY_COLUMNS)
    if args.per_rep:
        emit_csv_table(res.per_rep_rows(), args.per_rep, PER_REP_COLUMNS)
    return EXIT_OK


def cmd_screen(args) -> int:
    data = load_csv_dataset(args.data, args.response)
    names = predictor_names(args.data, args.response)
    keep = data.p if args.keep is None else args.keep
    idx = screen_marginal(data, keep)
    F = marginal_f(data)
    rows = [{"rank": r + 1, "index": int(j) + 1, "column": names[j], "F": F[j]} for r, j in enumerate(idx)]
    cols = ["rank", "index", "column", "F"]
    print_table(rows, cols)
    if args.out:
        emit_csv_table(rows, args.out, cols)
    return EXIT_OK


def _positive_float(s, flag):
    try:
        v = float(s)
    except ValueError:
        raise InputError(f"{flag} expects a number or 'auto', got {s!r}")
    if not v >= 0:
        raise InputError(f"{flag} must be nonnegative")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cql", description="Penalized composite quasi-likelihood regression")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="two-step penalized composite fit on a CSV dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--response", required=True)
    f.add_argument("--basis", default="cqr9")
    f.add_argument("--penalty", choices=["scad", "lasso", "adaptive", "none"], default="scad")
    f.add_argument("--lambda", dest="lam", default="auto")
    f.add_argument("--folds", type=int, default=5)
    f.add_argument("--cv-loss", choices=["own", "squared"], default="own")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--tol", type=float, default=1e-7)
    f.add_argument("--max-iter", type=int, default=10000)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit)

    w = sub.add_parser("weights", help="moment estimates and optimal weights from a lasso pilot")
    w.add_argument("--data", required=True)
    w.add_argument("--response", required=True)
    w.add_argument("--basis", default="cqr9")
    w.add_argument("--mode", choices=["constrained", "unconstrained"], default="constrained")
    w.add_argument("--folds", type=int, default=5)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out")
    w.set_defaults(func=cmd_weights)

    e = sub.add_parser("efficiency", help="population relative efficiencies or optimal CQR weights")
    e.add_argument("--dists", default="all")
    e.add_argument("--methods", default="all")
    e.add_argument("--K", help="comma-separated K values (default 3,5,9,19,29; 9 with --weights)")
    e.add_argument("--sigma", type=float, default=1.0, help="standard deviation of the normal kind")
    e.add_argument("--weights", action="store_true", help="emit optimal CQR weights instead")
    e.add_argument("--mode", choices=["constrained", "unconstrained"], default="constrained")
    e.add_argument("--out")
    e.set_defaults(func=cmd_efficiency)

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--reps", type=int)
    s.add_argument("--out")
    s.add_argument("--per-rep")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("screen", help="rank columns by marginal F statistic")
    c.add_argument("--data", required=True)
    c.add_argument("--response", required=True)
    c.add_argument("--keep", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_screen)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"cql: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, ContractError) as e:
        print(f"cql: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
