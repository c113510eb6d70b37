"""Parametric bootstrap of the studentized EBLUP pivot and the resulting intervals.

Each replicate draws ``Y* = X beta_hat + Z v* + e*`` from the fitted model,
refits with the estimator configuration of the original fit and records
``(T* - mu*_T) / sigma*_T`` where ``T* = c'(X beta_hat + Z v*)`` uses the
ORIGINAL ``beta_hat``.  Quantiles of the sorted pivots give the interval
``(mu_T + q1 sigma_T, mu_T + q2 sigma_T)`` around the plug-in moments of the
original data.

Replicates whose refitted variance components land on the floor are left out
of the pivot law (they are counted, not treated as failures): with
``A* = 0`` the EBLUP has zero predictive variance and the studentized pivot
is undefined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import BootstrapError, ConfigError, EblupError
from .estimation import FitConfig, ParameterEstimate, fit, fit_fh_batch
from .model import MixedTarget, ModelSpec, sample_outcome
from .prediction import conditional_moments, eblup_fh, fh_shrink

MAX_FAILED_FRACTION = 0.01
# replicates whose sigma*_T falls below this fraction of sigma_hat_T are discarded
SIGMA_RATIO_MIN = 1e-8
KINDS = ("equal_tail", "shortest_length")


@dataclass(frozen=True)
class PivotSample:
    """Sorted bootstrap pivots.  ``B`` is the number of replicates drawn;
    ``len(pivots) == B - n_floored - n_failed``."""

    pivots: np.ndarray
    B: int
    n_floored: int = 0
    n_failed: int = 0

    def __post_init__(self):
        piv = np.sort(np.asarray(self.pivots, dtype=float))
        if piv.ndim != 1 or piv.size < 2:
            raise BootstrapError("a pivot sample needs at least two values")
        if not np.all(np.isfinite(piv)):
            raise BootstrapError("pivot sample contains non-finite values")
        piv.setflags(write=False)
        object.__setattr__(self, "pivots", piv)

    @property
    def size(self) -> int:
        return self.pivots.size


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    q1: float
    q2: float
    kind: str
    alpha: float
    mu_T: float = math.nan
    sigma_T: float = math.nan
    n_floored: int = 0
    n_failed: int = 0

    @property
    def length(self) -> float:
        return self.upper - self.lower


def _order_index(x: float) -> int:
    """``ceil(x)`` robust to representation error such as 5 * 0.2 = 1.0000000000000002."""
    return int(math.ceil(x - 1e-9))


def _check_alpha(n: int, alpha: float) -> None:
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if n * alpha / 2 < 1 - 1e-9:
        raise ConfigError(f"{n} pivots are too few for alpha={alpha} (need B*alpha/2 >= 1)")


def equal_tail_quantiles(ps: PivotSample | np.ndarray, alpha: float) -> tuple[float, float]:
    """Order statistics ``ceil(N alpha/2)`` and ``ceil(N (1 - alpha/2))`` (1-based)."""
    piv = _sorted(ps)
    n = piv.size
    _check_alpha(n, alpha)
    k1 = _order_index(n * alpha / 2)
    k2 = _order_index(n * (1 - alpha / 2))
    return float(piv[k1 - 1]), float(piv[k2 - 1])


def shortest_length_quantiles(ps: PivotSample | np.ndarray, alpha: float) -> tuple[float, float]:
    """Narrowest window of ``w = ceil(N (1 - alpha))`` consecutive order statistics.

    Ties go to the leftmost window.
    """
    piv = _sorted(ps)
    n = piv.size
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    # only needs at least two candidate windows, a weaker requirement than equal tails
    if n * alpha < 1 - 1e-9:
        raise ConfigError(f"{n} pivots are too few for alpha={alpha} (need B*alpha >= 1)")
    w = _order_index(n * (1 - alpha))
    widths = piv[w - 1 :] - piv[: n - w + 1]
    j = int(np.argmin(widths))
    return float(piv[j]), float(piv[j + w - 1])


def _sorted(ps) -> np.ndarray:
    if isinstance(ps, PivotSample):
        return ps.pivots
    return np.sort(np.asarray(ps, dtype=float))


def quantiles(ps, alpha: float, kind: str) -> tuple[float, float]:
    if kind == "equal_tail":
        return equal_tail_quantiles(ps, alpha)
    if kind == "shortest_length":
        return shortest_length_quantiles(ps, alpha)
    raise ConfigError(f"unknown interval kind {kind!r}")


def _config_of(est: ParameterEstimate) -> FitConfig:
    if est.config is None:
        raise ConfigError("the estimate carries no estimator configuration to refit with")
    return est.config


def fh_pivot_matrix(spec: ModelSpec, est: ParameterEstimate, B: int, stream):
    """Bootstrap pivots for every area of a Fay-Herriot model at once.

    Returns ``(pivots (B, n), floored (B,), failed (B, n))``; floored rows and
    failed entries hold NaN.
    """
    if not spec.is_fay_herriot:
        raise ConfigError("fh_pivot_matrix needs the Fay-Herriot family")
    if B < 2:
        raise ConfigError("B must be at least 2")
    config = _config_of(est)
    X, d = spec.X, spec.cov.d
    Ystar, vstar = sample_outcome(spec, est.params, rngmod.as_generator(stream), size=B)
    theta_star = X @ est.beta_hat + vstar

    failed = np.zeros((B, spec.n), dtype=bool)
    try:
        beta_s, A_s, floored = fit_fh_batch(X, Ystar, d, config)
    except EblupError:
        beta_s = np.full((B, spec.p), np.nan)
        A_s = np.full(B, np.nan)
        floored = np.zeros(B, dtype=bool)
        for b in range(B):
            try:
                bb, ab, fb = fit_fh_batch(X, Ystar[b : b + 1], d, config)
            except EblupError:
                failed[b] = True
                continue
            beta_s[b], A_s[b], floored[b] = bb[0], ab[0], fb[0]

    ok = ~failed[:, 0]
    pred = fh_shrink(Ystar[ok], beta_s[ok] @ X.T, A_s[ok, None], d)
    theta_hat = np.full((B, spec.n), np.nan)
    sigma = np.full((B, spec.n), np.nan)
    theta_hat[ok] = pred.theta_hat
    sigma[ok] = pred.sigma_hat
    sigma_ref = eblup_fh(0.0, X, est.beta_hat, est.psi_hat[0], d).sigma_hat
    failed |= ~(sigma >= SIGMA_RATIO_MIN * sigma_ref)
    with np.errstate(invalid="ignore", divide="ignore"):
        pivots = (theta_star - theta_hat) / sigma
    failed &= ~floored[:, None]
    pivots[failed | floored[:, None]] = np.nan
    return pivots, floored, failed


def bootstrap_pivots(
    spec: ModelSpec, est: ParameterEstimate, target: MixedTarget, B: int, stream
) -> PivotSample:
    """Studentized-pivot bootstrap sample for the target ``c'(X beta + Z v)``."""
    if B < 2:
        raise ConfigError("B must be at least 2")
    i = target.unit_index()
    if spec.is_fay_herriot and i is not None:
        pivots, floored, failed = fh_pivot_matrix(spec, est, B, stream)
        return _collect(pivots[:, i], int(floored.sum()), int(failed[:, i].sum()), B)
    return _collect(*_generic_pivots(spec, est, target, B, stream), B)


def _generic_pivots(spec, est, target, B, stream):
    config = _config_of(est)
    c = target.c
    Ystar, vstar = sample_outcome(spec, est.params, rngmod.as_generator(stream), size=B)
    T_star = (spec.X @ est.beta_hat + vstar @ spec.Z.T) @ c
    sigma_ref = conditional_moments(spec, est.params, target, np.zeros(spec.n)).sigma_T
    pivots = np.full(B, np.nan)
    n_floored = 0
    for b in range(B):
        try:
            est_b = fit(spec, Ystar[b], config)
            mom = conditional_moments(spec, est_b.params, target, Ystar[b])
        except EblupError:
            continue
        if est_b.any_floored:
            n_floored += 1
            continue
        if mom.sigma_T >= SIGMA_RATIO_MIN * sigma_ref:
            pivots[b] = (T_star[b] - mom.mu_T) / mom.sigma_T
    failed = int(np.isnan(pivots).sum()) - n_floored
    return pivots, n_floored, failed


def _collect(pivots, n_floored, n_failed, B) -> PivotSample:
    if n_failed > MAX_FAILED_FRACTION * B:
        raise BootstrapError(
            f"{n_failed} of {B} bootstrap replicates failed (limit {MAX_FAILED_FRACTION:.0%})"
        )
    good = pivots[np.isfinite(pivots)]
    if good.size < 2:
        raise BootstrapError(f"only {good.size} usable pivots out of {B} replicates")
    return PivotSample(good, B, n_floored, n_failed)


@dataclass(frozen=True)
class IntervalConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    B: int = 1000
    alpha: float = 0.05
    kind: str = "equal_tail"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown interval kind {self.kind!r}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.B < 2:
            raise ConfigError("B must be at least 2")


def boot_stream(seed: int, index: int = 0):
    return rngmod.stream(seed, index, rngmod.BOOT)


def predict_interval(
    spec: ModelSpec, Y, target: MixedTarget, config: IntervalConfig = IntervalConfig()
) -> PredictionInterval:
    """Fit, bootstrap and assemble ``(mu_T + q1 sigma_T, mu_T + q2 sigma_T)``."""
    est = fit(spec, Y, config.fit)
    mom = conditional_moments(spec, est.params, target, Y)
    ps = bootstrap_pivots(spec, est, target, config.B, boot_stream(config.seed))
    return _assemble(mom.mu_T, mom.sigma_T, ps, config)


def _assemble(mu, sigma, ps: PivotSample, config: IntervalConfig) -> PredictionInterval:
    q1, q2 = quantiles(ps, config.alpha, config.kind)
    return PredictionInterval(
        mu + q1 * sigma, mu + q2 * sigma, q1, q2, config.kind, config.alpha,
        mu, sigma, ps.n_floored, ps.n_failed,
    )


def predict_intervals_fh(spec: ModelSpec, Y, config: IntervalConfig = IntervalConfig(),
                         est: ParameterEstimate | None = None) -> list[PredictionInterval]:
    """Bootstrap intervals for every area of a Fay-Herriot model from one
    shared set of replicates.  Area ``i`` matches ``predict_interval`` with
    ``c = e_i`` and the same seed."""
    if est is None:
        est = fit(spec, Y, config.fit)
    pivots, floored, failed = fh_pivot_matrix(spec, est, config.B, boot_stream(config.seed))
    pred = eblup_fh(Y, spec.X, est.beta_hat, est.psi_hat[0], spec.cov.d)
    out = []
    for i in range(spec.n):
        ps = _collect(pivots[:, i], int(floored.sum()), int(failed[:, i].sum()), config.B)
        out.append(_assemble(float(pred.theta_hat[i]), float(pred.sigma_hat[i]), ps, config))
    return out
