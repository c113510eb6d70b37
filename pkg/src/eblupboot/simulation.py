"""Monte Carlo coverage study for area-level (Fay-Herriot) prediction intervals.

Every run draws ``(theta, Y)`` from the two-level model with the true
parameters, builds each requested interval for every area and scores
``theta_i`` against it.  Runs are independent tasks keyed by
``(master_seed, run_index)`` so the report does not depend on how runs are
spread over worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import rng as rngmod
from .bootstrap import (
    IntervalConfig,
    boot_stream,
    equal_tail_quantiles,
    fh_pivot_matrix,
    shortest_length_quantiles,
)
from .classic import (
    METHODS,
    direct_interval,
    level2_interval,
    mspe_datta_rao_smith_raw,
    mspe_prasad_rao,
    normal_mspe_interval,
    z_value,
)
from .errors import ConfigError, EblupError, NumericalError
from .estimation import FitConfig, fit, pr_moment_A, wls_beta
from .model import ModelSpec, Parameters, sample_outcome
from .prediction import eblup_fh

DEFAULT_METHODS = ("Direct", "Cox", "FH", "PR", "PB_ET", "PB_SL")
MAX_FAILED_RUNS = 0.001


@dataclass(frozen=True)
class SimulationConfig:
    m: int = 15
    groups: tuple = ()
    A: float = 1.0
    beta: tuple = (0.0,)
    n_runs: int = 10_000
    B: int = 1000
    alpha: float = 0.05
    methods: tuple = DEFAULT_METHODS
    master_seed: int = 20240101
    # lower bound for the Prasad-Rao estimate behind Cox and PR; None uses the variance floor
    pr_floor: float | None = None

    def __post_init__(self):
        groups = tuple((str(g), int(k), float(d)) for g, k, d in self.groups)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "beta", tuple(float(b) for b in np.atleast_1d(self.beta)))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not groups:
            raise ConfigError("at least one group is required")
        if sum(k for _, k, _ in groups) != self.m:
            raise ConfigError(f"group sizes sum to {sum(k for _, k, _ in groups)}, expected m={self.m}")
        if any(k < 1 for _, k, _ in groups):
            raise ConfigError("every group needs at least one area")
        if len({g for g, _, _ in groups}) != len(groups):
            raise ConfigError("group labels must be unique")
        if any(d <= 0 for _, _, d in groups):
            raise ConfigError("all sampling variances D must be > 0")
        if not self.A > 0:
            raise ConfigError("A must be > 0")
        if len(self.beta) != 1:
            raise ConfigError("the study uses the mean-only model; beta must have one entry")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be at least 1")
        if self.B < 2:
            raise ConfigError("B must be at least 2")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.B * self.alpha / 2 < 1:
            raise ConfigError(f"B={self.B} is too small for alpha={self.alpha}")
        bad = [mt for mt in self.methods if mt not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if self.pr_floor is not None and not self.pr_floor > 0:
            raise ConfigError("pr_floor must be > 0")
        if "Level2" in self.methods and len({d for _, _, d in groups}) != 1:
            raise ConfigError("Level2 needs a common sampling variance in every group")

    @property
    def d(self) -> np.ndarray:
        return np.repeat([d for _, _, d in self.groups], [k for _, k, _ in self.groups])

    @property
    def group_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.groups)), [k for _, k, _ in self.groups])

    def spec(self) -> ModelSpec:
        return ModelSpec.fay_herriot(np.ones((self.m, 1)), self.d)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["groups"] = [list(g) for g in self.groups]
        out["beta"] = list(self.beta)
        out["methods"] = list(self.methods)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
        data = dict(data)
        if "pattern" in data:
            raise ConfigError("unknown configuration key 'pattern'")
        return cls(**data)


PATTERNS = {
    # G1 holds the largest D
    "a": dict(A=1.0, D=(4.0, 0.6, 0.5, 0.4, 0.1)),
    "b": dict(A=2.0, D=(8.0, 1.2, 1.0, 0.8, 0.2)),
    # variants with the smallest D doubled
    "a-text": dict(A=1.0, D=(4.0, 0.6, 0.5, 0.4, 0.2)),
    "b-text": dict(A=2.0, D=(8.0, 1.2, 1.0, 0.8, 0.4)),
}


def pattern_config(which: str, **overrides) -> SimulationConfig:
    """Five groups of three areas, ``x'beta = 0``, with the D pattern ``which``."""
    try:
        pat = PATTERNS[which]
    except KeyError:
        raise ConfigError(f"unknown pattern {which!r}; choose from {sorted(PATTERNS)}") from None
    groups = tuple((f"G{j + 1}", 3, d) for j, d in enumerate(pat["D"]))
    kw = dict(m=15, groups=groups, A=pat["A"], beta=(0.0,))
    kw.update(overrides)
    return SimulationConfig(**kw)


@dataclass
class RunResult:
    covered: np.ndarray  # (methods, m) bool
    length: np.ndarray  # (methods, m)
    floored_pr: int = 0
    floored_fh: int = 0
    boot_floored: int = 0
    boot_failed: int = 0
    mspe_clamped: int = 0
    level2_undefined: int = 0


def simulate_run(config: SimulationConfig, run: int) -> RunResult:
    """One Monte Carlo run: data, every interval method, coverage scores."""
    spec = config.spec()
    d, X = spec.cov.d, spec.X
    truth = Parameters(np.array(config.beta), np.array([config.A]))
    Y, v = sample_outcome(spec, truth, rngmod.stream(config.master_seed, run, rngmod.DATA))
    theta = X @ truth.beta + v
    alpha = config.alpha
    methods = config.methods
    lo = np.full((len(methods), config.m), np.nan)
    hi = np.full_like(lo, np.nan)
    res = RunResult(np.zeros(lo.shape, bool), np.zeros(lo.shape))

    need_pr = any(mt in methods for mt in ("Cox", "PR"))
    need_fh = any(mt in methods for mt in ("FH", "PB_ET", "PB_SL"))
    if need_pr:
        A_pr, fl = pr_moment_A(X, Y, d, config.pr_floor)
        res.floored_pr = int(fl)
        pred_pr = eblup_fh(Y, X, wls_beta(X, Y, 1.0 / (A_pr + d)), A_pr, d)
    if need_fh:
        est_fh = fit(spec, Y, FitConfig("WLS", "FH_moment"))
        res.floored_fh = int(est_fh.any_floored)
        A_fh = est_fh.psi_hat[0]
        pred_fh = eblup_fh(Y, X, est_fh.beta_hat, A_fh, d)

    piv_sorted = None
    for j, name in enumerate(methods):
        if name == "Direct":
            lo[j], hi[j] = direct_interval(Y, d, alpha)
        elif name == "Cox":
            h = z_value(alpha) * pred_pr.sigma_hat
            lo[j], hi[j] = pred_pr.theta_hat - h, pred_pr.theta_hat + h
        elif name == "PR":
            lo[j], hi[j] = normal_mspe_interval(pred_pr.theta_hat, mspe_prasad_rao(X, d, A_pr), alpha)
        elif name == "FH":
            raw, g12 = mspe_datta_rao_smith_raw(X, d, A_fh)
            res.mspe_clamped += int(np.sum(raw < 0))
            lo[j], hi[j] = normal_mspe_interval(pred_fh.theta_hat, np.where(raw < 0, g12, raw), alpha)
        elif name == "Level2":
            try:
                lo[j, :], hi[j, :] = level2_interval(
                    Y, alpha, config.B, _level2_seed(config, run), float(d[0])
                )
            except NumericalError:
                res.level2_undefined += 1
        else:
            if piv_sorted is None:
                pivots, floored, failed = fh_pivot_matrix(
                    spec, est_fh, config.B, boot_stream(config.master_seed, run)
                )
                res.boot_floored = int(floored.sum())
                res.boot_failed = int(failed.sum())
                if failed.sum(axis=0).max() > 0.01 * config.B:
                    raise NumericalError("too many failed bootstrap replicates")
                piv_sorted = [np.sort(pivots[np.isfinite(pivots[:, i]), i]) for i in range(config.m)]
            quant = equal_tail_quantiles if name == "PB_ET" else shortest_length_quantiles
            for i in range(config.m):
                q1, q2 = quant(piv_sorted[i], alpha)
                lo[j, i] = pred_fh.theta_hat[i] + q1 * pred_fh.sigma_hat[i]
                hi[j, i] = pred_fh.theta_hat[i] + q2 * pred_fh.sigma_hat[i]

    defined = ~np.isnan(lo)
    res.covered = defined & (lo <= theta) & (theta <= hi)
    res.length = np.where(defined, hi - lo, np.nan)
    return res


def _level2_seed(config: SimulationConfig, run: int) -> int:
    # Fold (master seed, run) into one integer seed for the level-2 stream.
    return int(np.random.SeedSequence([config.master_seed, run]).generate_state(1)[0])


def _run_chunk(args):
    config, start, stop = args
    out = []
    for r in range(start, stop):
        try:
            out.append((r, simulate_run(config, r)))
        except EblupError as err:
            out.append((r, repr(err)))
    return out


@dataclass(frozen=True)
class Cell:
    coverage: float
    mean_length: float
    se: float
    n: int


@dataclass
class CoverageReport:
    config: SimulationConfig
    cells: dict  # (group label, method) -> Cell
    counts: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def groups(self) -> list[str]:
        return [g for g, _, _ in self.config.groups]

    @property
    def methods(self) -> list[str]:
        return list(self.config.methods)

    def coverage(self, group: str, method: str) -> float:
        return self.cells[(group, method)].coverage

    def length(self, group: str, method: str) -> float:
        return self.cells[(group, method)].mean_length

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "counts": dict(self.counts),
            "cells": [
                {"group": g, "method": mt, "coverage": c.coverage, "mean_length": c.mean_length,
                 "mc_se": c.se, "n": c.n}
                for (g, mt), c in self.cells.items()
            ],
        }


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        env = os.environ.get("EBLUP_THREADS")
        workers = int(env) if env else 1
    return max(1, int(workers))


def run_coverage_study(config: SimulationConfig, workers: int | None = None,
                       progress: bool = False) -> CoverageReport:
    """Run ``config.n_runs`` Monte Carlo runs and aggregate coverage by group."""
    if config.n_runs < 1:
        raise ConfigError("n_runs must be at least 1")
    t0 = time.perf_counter()
    workers = worker_count(workers)
    n = config.n_runs
    chunk = max(1, min(50, n // (workers * 4) or 1))
    tasks = [(config, s, min(n, s + chunk)) for s in range(0, n, chunk)]

    results: list = [None] * n
    done = 0
    step = max(1, n // 100)
    next_report = step

    def consume(batch):
        nonlocal done, next_report
        for r, res in batch:
            results[r] = res
        done += len(batch)
        if progress and done >= next_report:
            print(f"\r{done}/{n} runs ({100 * done // n}%)", end="", file=sys.stderr, flush=True)
            next_report = (done // step + 1) * step

    if workers == 1:
        for t in tasks:
            consume(_run_chunk(t))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for batch in pool.map(_run_chunk, tasks):
                consume(batch)
    if progress:
        print(file=sys.stderr)

    failed = [r for r in results if not isinstance(r, RunResult)]
    if len(failed) > MAX_FAILED_RUNS * n:
        raise NumericalError(f"{len(failed)} of {n} runs failed; first error: {failed[0]}")
    ok = [r for r in results if isinstance(r, RunResult)]
    report = aggregate(config, ok)
    report.counts["failed_runs"] = len(failed)
    report.wall_time = time.perf_counter() - t0
    return report


def aggregate(config: SimulationConfig, runs: list[RunResult]) -> CoverageReport:
    covered = np.stack([r.covered for r in runs])  # (runs, methods, m)
    length = np.stack([r.length for r in runs])
    gidx = config.group_index
    cells = {}
    for gj, (label, _, _) in enumerate(config.groups):
        cols = gidx == gj
        for mj, method in enumerate(config.methods):
            cov = covered[:, mj, cols]
            ln = length[:, mj, cols]
            defined = ~np.isnan(ln)
            N = int(defined.sum())
            c = float(cov[defined].sum() / N) if N else float("nan")
            L = float(ln[defined].sum() / N) if N else float("nan")
            se = float(np.sqrt(c * (1 - c) / N)) if N else float("nan")
            cells[(label, method)] = Cell(c, L, se, N)
    counts = {
        "runs": len(runs),
        "floored_pr": sum(r.floored_pr for r in runs),
        "floored_fh": sum(r.floored_fh for r in runs),
        "bootstrap_floored": sum(r.boot_floored for r in runs),
        "bootstrap_failed": sum(r.boot_failed for r in runs),
        "mspe_clamped": sum(r.mspe_clamped for r in runs),
        "level2_undefined": sum(r.level2_undefined for r in runs),
    }
    return CoverageReport(config, cells, counts)


def _label(method: str) -> str:
    return method.replace("_", "-")


def render_report(report: CoverageReport, format: str = "text_table") -> bytes:
    """Render as a group-by-method text grid, CSV or JSON (wall time is excluded so
    output is reproducible)."""
    if format == "text_table":
        methods = report.methods
        width = 14
        lines = ["Group".ljust(6) + "".join(_label(mt).rjust(width) for mt in methods)]
        for g in report.groups:
            row = g.ljust(6)
            for mt in methods:
                c = report.cells[(g, mt)]
                row += f"{100 * c.coverage:.1f} ({c.mean_length:.2f})".rjust(width)
            lines.append(row)
        return ("\n".join(lines) + "\n").encode()
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "method", "coverage", "mean_length", "mc_se", "n"])
        for (g, mt), c in report.cells.items():
            w.writerow([g, mt, repr(c.coverage), repr(c.mean_length), repr(c.se), c.n])
        return buf.getvalue().encode()
    if format == "json":
        return (json.dumps(report.to_dict(), indent=2) + "\n").encode()
    raise ConfigError(f"unknown report format {format!r}")
