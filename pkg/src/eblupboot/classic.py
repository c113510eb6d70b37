"""Normal-theory comparison intervals and the level-2 bootstrap interval."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import rng as rngmod
from .bootstrap import _order_index
from .errors import ConfigError, DataError, NumericalError, RankDeficientError
from .prediction import eblup_fh

METHODS = ("Direct", "Cox", "PR", "FH", "Level2", "PB_ET", "PB_SL")


@dataclass(frozen=True)
class IntervalMethod:
    name: str
    alpha: float = 0.05

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown interval method {self.name!r}; choose from {METHODS}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def is_bootstrap(self) -> bool:
        return self.name.startswith("PB_")


def z_value(alpha: float) -> float:
    """Upper ``alpha/2`` standard normal quantile."""
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return float(norm.isf(alpha / 2))


def direct_interval(Y, D, alpha: float):
    """``Y +/- z sqrt(D)`` from the level-1 model alone."""
    h = z_value(alpha) * np.sqrt(np.asarray(D, dtype=float))
    Y = np.asarray(Y, dtype=float)
    return (Y - h)[()], (Y + h)[()]


def cox_interval(Y, x, beta_hat, A_hat, D, alpha: float):
    """Empirical Bayes interval ``EBLUP +/- z sqrt(D (1 - B_hat))``."""
    pred = eblup_fh(Y, x, beta_hat, A_hat, D)
    h = z_value(alpha) * pred.sigma_hat
    return (pred.theta_hat - h)[()], (pred.theta_hat + h)[()]


def _g12(X, D, A_hat):
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    D = np.asarray(D, dtype=float)
    total = A_hat + D
    B = D / total
    g1 = A_hat * D / total
    info = (X / total[:, None]).T @ X
    try:
        lev = np.einsum("ij,ji->i", X, np.linalg.solve(info, X.T))
    except np.linalg.LinAlgError as err:
        raise RankDeficientError(f"sum_j x_j x_j'/(A + D_j) is singular: {err}") from err
    g2 = B**2 * lev
    return g1, g2, total


def _area(values, i):
    return values if i is None else float(values[i])


def mspe_prasad_rao(X, D, A_hat: float, i: int | None = None):
    """Prasad-Rao MSPE estimate ``g1 + g2 + 2 g3`` of the EBLUP for area ``i``.

    ``g3 = D_i^2 (A + D_i)^{-3} V``, ``V = (2/n^2) sum_j (A + D_j)^2``.  With
    ``i=None`` the whole vector of areas is returned.
    """
    if A_hat < 0:
        raise DataError("A_hat must be non-negative")
    D = np.asarray(D, dtype=float)
    g1, g2, total = _g12(X, D, A_hat)
    n = D.size
    V = 2.0 / n**2 * np.sum(total**2)
    g3 = D**2 / total**3 * V
    return _area(g1 + g2 + 2 * g3, i)


def fh_bias(D, A_hat: float) -> float:
    """First-order bias of the Fay-Herriot moment estimator of A."""
    w = 1.0 / (A_hat + np.asarray(D, dtype=float))
    s1, s2 = w.sum(), (w**2).sum()
    return 2.0 * (w.size * s2 - s1**2) / s1**3


def mspe_datta_rao_smith_raw(X, D, A_hat: float):
    """Unclamped ``g1 + g2 + 2 g3_FH - B^2 b_FH`` for every area, plus ``g1 + g2``."""
    if A_hat < 0:
        raise DataError("A_hat must be non-negative")
    D = np.asarray(D, dtype=float)
    g1, g2, total = _g12(X, D, A_hat)
    n = D.size
    V = 2.0 * n / np.sum(1.0 / total) ** 2
    g3 = D**2 / total**3 * V
    B = D / total
    return g1 + g2 + 2 * g3 - B**2 * fh_bias(D, A_hat), g1 + g2


def mspe_datta_rao_smith(X, D, A_hat: float, i: int | None = None):
    """Datta-Rao-Smith MSPE estimate for the Fay-Herriot-moment EBLUP.

    Negative values (possible when A_hat is tiny) are replaced by ``g1 + g2``.
    """
    raw, g12 = mspe_datta_rao_smith_raw(X, D, A_hat)
    return _area(np.where(raw < 0, g12, raw), i)


def normal_mspe_interval(theta_hat, mspe, alpha: float):
    """``theta_hat +/- z sqrt(mspe)``."""
    mspe = np.asarray(mspe, dtype=float)
    if np.any(mspe < 0):
        raise NumericalError("negative MSPE estimate")
    h = z_value(alpha) * np.sqrt(mspe)
    theta_hat = np.asarray(theta_hat, dtype=float)
    return (theta_hat - h)[()], (theta_hat + h)[()]


def level2_interval(Y, alpha: float, B: int, seed: int, D: float = 1.0):
    """Non area-specific bootstrap interval ``(mu - t1 tau, mu + t2 tau)``.

    Mean-only model with common sampling variance ``D``: ``mu = mean(Y)`` and
    ``tau^2 = max(0, s^2 - D)``.  Cutoffs are the equal-tail order statistics
    of ``(theta* - mu*) / tau*`` over ``B`` replicates.  A replicate with
    ``tau* = 0`` can never cover, so its pivot is kept as a signed infinity.
    """
    Y = np.asarray(Y, dtype=float)
    n = Y.size
    if n < 2:
        raise DataError("need at least two observations")
    if B < 2:
        raise ConfigError("B must be at least 2")
    mu = Y.mean()
    tau2 = max(0.0, Y.var(ddof=1) - D)
    if tau2 <= 0:
        raise NumericalError("tau^2 estimate is zero; the level-2 interval is undefined")
    gen = rngmod.stream(seed, 0, rngmod.LEVEL2)
    z = gen.standard_normal((B, 2 * n))
    theta = mu + np.sqrt(tau2) * z[:, :n]
    Ys = theta + np.sqrt(D) * z[:, n:]
    mu_s = Ys.mean(axis=1)
    tau_s = np.sqrt(np.maximum(0.0, Ys.var(axis=1, ddof=1) - D))
    diff = theta[:, 0] - mu_s
    with np.errstate(divide="ignore", invalid="ignore"):
        piv = np.where(tau_s > 0, diff / tau_s, np.copysign(np.inf, diff))
    piv = np.sort(piv)
    if B * alpha / 2 < 1 - 1e-9:
        raise ConfigError(f"B={B} is too small for alpha={alpha}")
    q1 = piv[_order_index(B * alpha / 2) - 1]
    q2 = piv[_order_index(B * (1 - alpha / 2)) - 1]
    tau = np.sqrt(tau2)
    return float(mu + q1 * tau), float(mu + q2 * tau)
