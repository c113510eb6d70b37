"""Estimation of ``(beta, psi)``: OLS/WLS for beta and moment estimators of A.

Every routine accepts a single response vector ``Y`` of shape ``(n,)`` or a
batch of shape ``(B, n)``; the batch form is what the bootstrap uses to refit
thousands of replicates at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ConvergenceError, DataError, RankDeficientError
from .model import FLOOR_FACTOR, ModelSpec, Parameters, build_sigma, chol_factor

BETA_METHODS = ("OLS", "WLS")
PSI_METHODS = ("PR_moment", "FH_moment", "plugin", "oracle")


def _design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _check_rank(X):
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError("design matrix X is rank deficient")


def ols_beta(X, Y) -> np.ndarray:
    """``(X'X)^{-1} X'Y``."""
    X = _design(X)
    _check_rank(X)
    Y = np.asarray(Y, dtype=float)
    return np.linalg.solve(X.T @ X, (Y @ X).T).T


def wls_beta(X, Y, weights) -> np.ndarray:
    """Weighted least squares ``(X'WX)^{-1} X'WY`` with ``W = diag(weights)``.

    ``weights`` may be ``(n,)`` or batched ``(B, n)`` alongside ``Y``.
    """
    X = _design(X)
    Y = np.asarray(Y, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(~(w > 0)):
        raise DataError("WLS weights must be positive")
    _check_rank(X)
    if X.shape[1] == 1:
        x = X[:, 0]
        return (np.sum(w * x * Y, axis=-1) / np.sum(w * x * x, axis=-1))[..., None]
    XtWX = np.einsum("ni,...n,nj->...ij", X, w, X)
    XtWY = np.einsum("ni,...n,...n->...i", X, w, Y)
    try:
        return np.linalg.solve(XtWX, XtWY[..., None])[..., 0]
    except np.linalg.LinAlgError as err:
        raise RankDeficientError(f"weighted normal equations are singular: {err}") from err


def default_floor(D) -> float:
    return FLOOR_FACTOR * float(np.median(D))


def pr_moment_raw(X, Y, D) -> np.ndarray:
    """Unfloored Prasad-Rao moment estimate of A."""
    X = _design(X)
    n, p = X.shape
    if n <= p:
        raise DataError(f"Prasad-Rao estimator needs n > p (n={n}, p={p})")
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    _check_rank(X)
    XtX_inv_Xt = np.linalg.solve(X.T @ X, X.T)
    h = np.einsum("ij,ji->i", X, XtX_inv_Xt)
    resid = Y - (Y @ XtX_inv_Xt.T) @ X.T
    return (np.sum(resid**2, axis=-1) - np.sum(D * (1.0 - h))) / (n - p)


def pr_moment_A(X, Y, D, floor: float | None = None):
    """Prasad-Rao estimate ``max(floor, raw)`` and its floored flag."""
    floor = default_floor(D) if floor is None else floor
    raw = pr_moment_raw(X, Y, D)
    floored = raw < floor
    return np.where(floored, floor, raw)[()], floored[()]


def fh_moment_g(X, Y, D, A) -> np.ndarray:
    """``sum_i (Y_i - x_i' beta~(A))^2 / (A + D_i)`` with beta~(A) the WLS fit."""
    X = _design(X)
    A = np.asarray(A, dtype=float)
    w = 1.0 / (A[..., None] + np.asarray(D, dtype=float))
    w = np.broadcast_to(w, np.broadcast_shapes(w.shape, np.shape(Y)))
    beta = wls_beta(X, Y, w)
    resid = Y - beta @ X.T
    return np.sum(w * resid**2, axis=-1)


def fh_moment_A(X, Y, D, tol: float = 1e-10, max_iter: int = 200, floor: float | None = None):
    """Fay-Herriot moment estimate of A by bisection.

    Solves ``g(A) = n - p`` on ``[floor, A_max]``, ``A_max = 100 (s^2 + max D)``
    with ``s^2`` the OLS residual variance.  ``tol`` bounds the absolute
    residual ``|g(A) - (n - p)|``.  Returns ``(A_hat, floored, iterations)``.
    """
    X = _design(X)
    n, p = X.shape
    if n <= p:
        raise DataError(f"Fay-Herriot estimator needs n > p (n={n}, p={p})")
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    floor = default_floor(D) if floor is None else floor
    target = float(n - p)
    batch = Y.shape[:-1]
    Yb = Y.reshape(-1, n)
    m = Yb.shape[0]

    resid = Yb - ols_beta(X, Yb) @ X.T
    s2 = np.sum(resid**2, axis=-1) / (n - p)
    lo = np.full(m, floor)
    hi = 100.0 * (s2 + D.max())
    g_lo = fh_moment_g(X, Yb, D, lo)
    g_hi = fh_moment_g(X, Yb, D, hi)
    if np.any(g_hi > g_lo + 1e-12 * (np.abs(g_lo) + 1.0)):
        raise ConvergenceError("g(A) is not decreasing over the bracket", bracket=(lo, hi))

    A = np.full(m, floor)
    floored = g_lo < target
    iters = np.zeros(m, dtype=int)
    active = ~floored
    if np.any(active & (g_hi > target)):
        raise ConvergenceError("g(A_max) exceeds n - p; bracket does not contain the root",
                               bracket=(lo, hi))
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        mid = 0.5 * (lo[idx] + hi[idx])
        g_mid = fh_moment_g(X, Yb[idx], D, mid)
        slack = 1e-12 * (np.abs(g_lo[idx]) + 1.0)
        if np.any(g_mid > g_lo[idx] + slack) or np.any(g_mid < g_hi[idx] - slack):
            raise ConvergenceError("g(A) is not monotone inside the bracket",
                                   bracket=(lo[idx], hi[idx]))
        iters[idx] += 1
        resid_g = g_mid - target
        done = (np.abs(resid_g) <= tol) | (hi[idx] - lo[idx] <= 4 * np.finfo(float).eps * hi[idx])
        A[idx[done]] = mid[done]
        up = resid_g > 0
        lo[idx[up]], g_lo[idx[up]] = mid[up], g_mid[up]
        hi[idx[~up]], g_hi[idx[~up]] = mid[~up], g_mid[~up]
        active[idx[done]] = False
    if active.any():
        i = np.flatnonzero(active)[0]
        raise ConvergenceError(
            f"Fay-Herriot moment equation did not converge in {max_iter} iterations; "
            f"last bracket [{lo[i]:.17g}, {hi[i]:.17g}]",
            bracket=(lo[i], hi[i]),
        )
    return A.reshape(batch)[()], floored.reshape(batch)[()], iters.reshape(batch)[()]


@dataclass(frozen=True)
class FitConfig:
    """Estimator choice: ``beta_method`` in {OLS, WLS} and ``psi_method`` in
    {PR_moment, FH_moment, plugin, oracle}.

    ``plugin(spec, Y)`` returns a raw psi estimate for non Fay-Herriot
    families; ``oracle`` fixes the returned parameters regardless of the data.
    """

    beta_method: str = "WLS"
    psi_method: str = "FH_moment"
    plugin: Callable | None = None
    oracle: Parameters | None = None
    tol: float = 1e-10
    max_iter: int = 200

    def validate(self, spec: ModelSpec) -> None:
        if self.beta_method not in BETA_METHODS:
            raise ConfigError(f"unknown beta estimator {self.beta_method!r}")
        if self.psi_method not in PSI_METHODS:
            raise ConfigError(f"unknown psi estimator {self.psi_method!r}")
        if self.psi_method in ("PR_moment", "FH_moment") and not spec.is_fay_herriot:
            raise ConfigError(f"{self.psi_method} is only defined for the Fay-Herriot family")
        if self.psi_method == "plugin" and self.plugin is None:
            raise ConfigError("psi_method='plugin' requires a plugin callable")
        if self.psi_method == "oracle" and self.oracle is None:
            raise ConfigError("psi_method='oracle' requires oracle parameters")


@dataclass(frozen=True)
class ParameterEstimate:
    beta_hat: np.ndarray
    psi_hat: np.ndarray
    method: tuple[str, str]
    floored: tuple[bool, ...]
    iterations: int = 0
    config: FitConfig | None = None

    @property
    def params(self) -> Parameters:
        return Parameters(self.beta_hat, self.psi_hat)

    @property
    def any_floored(self) -> bool:
        return any(self.floored)


def gls_beta(spec: ModelSpec, Y, psi) -> np.ndarray:
    """``(X' S^{-1} X)^{-1} X' S^{-1} Y`` with ``S = Sigma(psi)``."""
    L = chol_factor(build_sigma(spec, psi))
    from scipy.linalg import solve_triangular

    Xs = solve_triangular(L, spec.X, lower=True)
    Ys = solve_triangular(L, np.asarray(Y, dtype=float), lower=True)
    return ols_beta(Xs, Ys)


def fit(spec: ModelSpec, Y, config: FitConfig = FitConfig()) -> ParameterEstimate:
    config.validate(spec)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (spec.n,):
        raise DataError(f"Y must have shape ({spec.n},), got {Y.shape}")
    method = (config.beta_method, config.psi_method)

    if config.psi_method == "oracle":
        o = config.oracle
        return ParameterEstimate(o.beta, o.psi, method, (False,) * spec.k, 0, config)

    iterations = 0
    if config.psi_method == "PR_moment":
        A, fl = pr_moment_A(spec.X, Y, spec.cov.d)
        psi, floored = np.array([A]), (bool(fl),)
    elif config.psi_method == "FH_moment":
        A, fl, iterations = fh_moment_A(spec.X, Y, spec.cov.d, config.tol, config.max_iter)
        psi, floored = np.array([A]), (bool(fl),)
        iterations = int(iterations)
    else:
        raw = np.atleast_1d(np.asarray(config.plugin(spec, Y), dtype=float))
        if raw.shape != (spec.k,):
            raise DataError(f"plugin returned psi of shape {raw.shape}, expected ({spec.k},)")
        floor = spec.floor(raw)
        below = raw < floor
        psi = np.where(below, floor, raw)
        floored = tuple(bool(b) for b in below)

    if config.beta_method == "OLS":
        beta = ols_beta(spec.X, Y)
    elif spec.is_fay_herriot:
        beta = wls_beta(spec.X, Y, 1.0 / (psi[0] + spec.cov.d))
    else:
        beta = gls_beta(spec, Y, psi)
    return ParameterEstimate(beta, psi, method, floored, iterations, config)


def fit_fh_batch(X, Y, D, config: FitConfig):
    """Refit a batch ``Y`` of shape ``(B, n)`` under the Fay-Herriot family.

    Returns ``(beta (B, p), A (B,), floored (B,))``.
    """
    X = _design(X)
    B = Y.shape[0]
    if config.psi_method == "oracle":
        o = config.oracle
        return np.tile(o.beta, (B, 1)), np.full(B, o.psi[0]), np.zeros(B, dtype=bool)
    if config.psi_method == "PR_moment":
        A, floored = pr_moment_A(X, Y, D)
    elif config.psi_method == "FH_moment":
        A, floored, _ = fh_moment_A(X, Y, D, config.tol, config.max_iter)
    else:
        raise ConfigError(f"{config.psi_method} is not available for batch Fay-Herriot refits")
    if config.beta_method == "OLS":
        beta = ols_beta(X, Y)
    else:
        beta = wls_beta(X, Y, 1.0 / (A[:, None] + D))
    return beta, A, floored
