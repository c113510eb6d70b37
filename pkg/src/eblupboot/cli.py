"""Command line interface: ``eblupboot fit | interval | simulate``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bootstrap import IntervalConfig, predict_intervals_fh
from .classic import (
    cox_interval,
    direct_interval,
    level2_interval,
    mspe_datta_rao_smith,
    mspe_prasad_rao,
    normal_mspe_interval,
)
from .errors import ConfigError, DataError, EblupError, NumericalError
from .estimation import FitConfig, fit
from .model import ModelSpec
from .prediction import eblup_fh
from .simulation import SimulationConfig, pattern_config, render_report, run_coverage_study

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
INTERVAL_METHODS = ("direct", "cox", "pr", "fh", "level2", "pb-et", "pb-sl")
REQUIRED = ("area_id", "y", "d_var")


class Dataset:
    def __init__(self, area_ids, y, d, X):
        self.area_ids = area_ids
        self.y = y
        self.d = d
        self.X = X

    def spec(self) -> ModelSpec:
        return ModelSpec.fay_herriot(self.X, self.d)


def read_dataset(path) -> Dataset:
    """Parse a headered CSV with columns area_id, y, d_var, x1..xp.

    Without x columns the model is mean-only (intercept).
    """
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
    rows = list(csv.reader(io.StringIO(text)))
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    _, header = rows[0]
    header = [h.strip() for h in header]
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise DataError(f"{path}: line 1: missing column(s) {', '.join(missing)}")
    xcols = sorted((h for h in header if h.startswith("x") and h[1:].isdigit()),
                   key=lambda h: int(h[1:]))
    expected = [f"x{j}" for j in range(1, len(xcols) + 1)]
    if xcols != expected:
        raise DataError(f"{path}: line 1: covariate columns must be x1..xp, got {xcols}")
    extra = set(header) - set(REQUIRED) - set(xcols)
    if extra:
        raise DataError(f"{path}: line 1: unknown column(s) {', '.join(sorted(extra))}")
    pos = {h: j for j, h in enumerate(header)}

    ids, y, d, X = [], [], [], []
    for lineno, r in rows[1:]:
        if len(r) != len(header):
            raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(r)}")
        try:
            yi = float(r[pos["y"]])
            di = float(r[pos["d_var"]])
            xi = [float(r[pos[c]]) for c in xcols]
        except ValueError as err:
            raise DataError(f"{path}: line {lineno}: {err}") from None
        if not np.isfinite([yi, di, *xi]).all():
            raise DataError(f"{path}: line {lineno}: non-finite value")
        if di <= 0:
            raise DataError(f"{path}: line {lineno}: d_var must be > 0")
        area = r[pos["area_id"]].strip()
        if area in ids:
            raise DataError(f"{path}: line {lineno}: duplicate area_id {area!r}")
        ids.append(area)
        y.append(yi)
        d.append(di)
        X.append(xi if xcols else [1.0])
    p = len(X[0]) if X else 1
    if len(ids) < p + 2:
        raise DataError(f"{path}: need at least {p + 2} data rows, got {len(ids)}")
    return Dataset(ids, np.array(y), np.array(d), np.array(X))


def _fit_config(beta: str, psi: str) -> FitConfig:
    return FitConfig(beta.upper(), {"pr": "PR_moment", "fh": "FH_moment"}[psi])


def cmd_fit(args) -> dict:
    data = read_dataset(args.dataset)
    est = fit(data.spec(), data.y, _fit_config(args.beta, args.psi))
    return {
        "beta_hat": est.beta_hat.tolist(),
        "A_hat": float(est.psi_hat[0]),
        "method": list(est.method),
        "floored": bool(est.floored[0]),
        "iterations": est.iterations,
    }


def _alpha(text: str) -> float:
    try:
        a = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid alpha {text!r}") from None
    if not 0 < a < 1:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {a}")
    return a


def cmd_interval(args) -> list[dict]:
    data = read_dataset(args.dataset)
    spec = data.spec()
    X, d, Y = data.X, data.d, data.y
    method, alpha = args.method, args.alpha
    if args.area:
        unknown = [a for a in args.area if a not in data.area_ids]
        if unknown:
            raise DataError(f"unknown area_id(s): {', '.join(unknown)}")
        areas = [data.area_ids.index(a) for a in args.area]
    else:
        areas = list(range(len(Y)))

    extra = {}
    if method == "direct":
        lo, hi = direct_interval(Y, d, alpha)
    elif method in ("cox", "pr"):
        est = fit(spec, Y, FitConfig("WLS", "PR_moment"))
        A = est.psi_hat[0]
        if method == "cox":
            lo, hi = cox_interval(Y, X, est.beta_hat, A, d, alpha)
        else:
            pred = eblup_fh(Y, X, est.beta_hat, A, d)
            lo, hi = normal_mspe_interval(pred.theta_hat, mspe_prasad_rao(X, d, A), alpha)
        extra = {"A_hat": float(A), "floored": bool(est.floored[0])}
    elif method == "fh":
        est = fit(spec, Y, FitConfig("WLS", "FH_moment"))
        A = est.psi_hat[0]
        pred = eblup_fh(Y, X, est.beta_hat, A, d)
        lo, hi = normal_mspe_interval(pred.theta_hat, mspe_datta_rao_smith(X, d, A), alpha)
        extra = {"A_hat": float(A), "floored": bool(est.floored[0])}
    elif method == "level2":
        if X.shape[1] != 1 or not np.all(X == 1) or np.ptp(d) != 0:
            raise ConfigError("level2 needs a mean-only model with a common d_var")
        l2 = level2_interval(Y, alpha, args.boot, args.seed, float(d[0]))
        lo, hi = np.full(len(Y), l2[0]), np.full(len(Y), l2[1])
    else:
        kind = "equal_tail" if method == "pb-et" else "shortest_length"
        cfg = IntervalConfig(_fit_config("wls", args.psi), args.boot, alpha, kind, args.seed)
        ivs = predict_intervals_fh(spec, Y, cfg)
        lo = np.array([iv.lower for iv in ivs])
        hi = np.array([iv.upper for iv in ivs])
        extra = {"n_floored": ivs[0].n_floored}
    out = []
    for i in areas:
        row = {"area_id": data.area_ids[i], "method": method, "alpha": alpha,
               "lower": float(lo[i]), "upper": float(hi[i])}
        if method in ("pb-et", "pb-sl"):
            row.update(q1=ivs[i].q1, q2=ivs[i].q2, n_failed=ivs[i].n_failed)
        row.update(extra)
        out.append(row)
    return out


def load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError("config must be a flat JSON object")
    return data


def cmd_simulate(args) -> bytes:
    if args.config:
        cfg = SimulationConfig.from_dict(load_config(args.config))
    else:
        cfg = pattern_config(args.pattern)
    over = {}
    if args.runs is not None:
        over["n_runs"] = args.runs
    if args.boot is not None:
        over["B"] = args.boot
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.alpha is not None:
        over["alpha"] = args.alpha
    if args.methods:
        over["methods"] = tuple(args.methods.split(","))
    if over:
        cfg = SimulationConfig.from_dict({**cfg.to_dict(), **over})
    report = run_coverage_study(cfg, workers=_workers(args.workers), progress=not args.quiet)
    print(f"wall time {report.wall_time:.1f}s", file=sys.stderr)
    return render_report(report, args.format)


def _workers(requested: int | None) -> int:
    cap = os.environ.get("EBLUP_THREADS")
    n = requested if requested is not None else (int(cap) if cap else 1)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eblupboot", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="estimate beta and A from a dataset")
    f.add_argument("dataset")
    f.add_argument("--beta", choices=("ols", "wls"), default="wls")
    f.add_argument("--psi", choices=("fh", "pr"), default="fh")

    i = sub.add_parser("interval", help="prediction intervals for small areas")
    i.add_argument("dataset")
    i.add_argument("--area", action="append", help="area_id (repeatable; default all)")
    i.add_argument("--alpha", type=_alpha, default=0.05)
    i.add_argument("--method", choices=INTERVAL_METHODS, default="pb-et")
    i.add_argument("--psi", choices=("fh", "pr"), default="fh",
                   help="variance estimator refitted in the parametric bootstrap")
    i.add_argument("--boot", type=int, default=1000)
    i.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("simulate", help="Monte Carlo coverage study")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--pattern", choices=("a", "b", "a-text", "b-text"))
    src.add_argument("--config")
    s.add_argument("--runs", type=int)
    s.add_argument("--boot", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--alpha", type=_alpha)
    s.add_argument("--methods", help="comma separated, e.g. Cox,FH,PR,PB_ET,PB_SL")
    s.add_argument("--workers", type=int)
    s.add_argument("--out")
    s.add_argument("--format", choices=("text_table", "csv", "json"), default="text_table")
    s.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            payload = (json.dumps(cmd_fit(args), indent=2) + "\n").encode()
        elif args.command == "interval":
            payload = (json.dumps(cmd_interval(args), indent=2) + "\n").encode()
        else:
            payload = cmd_simulate(args)
    except ConfigError as err:
        print(f"eblupboot: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"eblupboot: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, EblupError) as err:
        print(f"eblupboot: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    if getattr(args, "out", None):
        Path(args.out).write_bytes(payload)
    else:
        sys.stdout.buffer.write(payload)
        sys.stdout.flush()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
