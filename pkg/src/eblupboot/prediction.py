"""Conditional (predictive) moments of a mixed effect ``T = c'(X beta + Z v)`` given Y."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .errors import DataError, DegenerateTargetError, NumericalError
from .model import MixedTarget, ModelSpec, Parameters, build_sigma, chol_factor

# sigma_T^2 below this fraction of Var(T) flags a (near) degenerate target
DEGENERATE_RATIO = 1e-4


@dataclass(frozen=True)
class PredictiveMoments:
    mu_T: float
    sigma_T: float
    degenerate: bool = False


def conditional_moments(
    spec: ModelSpec, params: Parameters, target: MixedTarget, Y, check: bool = False
) -> PredictiveMoments:
    """Mean and standard deviation of ``T | Y`` under ``params``.

    ``mu_T = c'X beta + c'Z D Z' S^{-1} (Y - X beta)`` and
    ``sigma_T^2 = c'Z (D - D Z' S^{-1} Z D) Z'c`` where ``S = R + Z D Z'``.
    With ``check=True`` the alternative form ``c'R S^{-1} X beta + c'Z D Z' S^{-1} Y``
    is evaluated as well and must agree to 1e-10 relative.
    """
    c = target.c
    Y = np.asarray(Y, dtype=float)
    if c.shape != (spec.n,) or Y.shape != (spec.n,):
        raise DataError("c and Y must both be n-vectors")
    psi = params.psi
    fitted = spec.X @ params.beta

    if spec.is_fay_herriot:
        A, d = psi[0], spec.cov.d
        sig = build_sigma(spec, psi).diagonal()
        u = A * c
        w = u / sig
        # diagonal algebra: Var(theta_i | Y) = A d_i / (A + d_i)
        sigma2 = (c * c) @ (A * d / sig)
        mu = c @ fitted + w @ (Y - fitted)
        if check:
            alt = (d * c / sig) @ fitted + w @ Y
            _agree(mu, alt)
    else:
        S = build_sigma(spec, psi)
        cf = (chol_factor(S), True)
        Dm = spec.cov.D(psi)
        zc = spec.Z.T @ c
        u = spec.Z @ (Dm @ zc)
        w = cho_solve(cf, u)
        var_T = zc @ Dm @ zc
        sigma2 = var_T - u @ w
        mu = c @ fitted + w @ (Y - fitted)
        if check:
            alt = (spec.cov.R(psi) @ c) @ cho_solve(cf, fitted) + w @ Y
            _agree(mu, alt)

    if not sigma2 > 0:
        raise DegenerateTargetError(f"conditional variance of T is {sigma2:g} (<= 0)")
    var_total = c @ build_sigma(spec, psi) @ c if not spec.is_fay_herriot else (sig * c) @ c
    return PredictiveMoments(float(mu), float(np.sqrt(sigma2)), bool(sigma2 <= DEGENERATE_RATIO * var_total))


def _agree(a, b, rtol=1e-10):
    if abs(a - b) > rtol * max(1.0, abs(a), abs(b)):
        raise NumericalError(
            f"conditional mean identity failed: {a!r} vs {b!r}; covariance assembly is inconsistent"
        )


@dataclass(frozen=True)
class FHPrediction:
    theta_hat: np.ndarray
    B_hat: np.ndarray
    sigma_hat: np.ndarray
    degenerate: np.ndarray


def eblup_fh(Y, x, beta_hat, A_hat, D) -> FHPrediction:
    """Fay-Herriot EBLUP ``(1 - B) Y + B x'beta`` with ``B = D / (A + D)``.

    Works elementwise: ``Y`` and ``D`` may be scalars or area vectors, ``x``
    the matching row(s) of X.  ``sigma_hat = sqrt(D (1 - B))``.
    """
    synth = np.asarray(x, dtype=float) @ np.asarray(beta_hat, dtype=float)
    return fh_shrink(Y, synth, A_hat, D)


def fh_shrink(Y, synth, A_hat, D) -> FHPrediction:
    """EBLUP from a precomputed synthetic estimate ``synth = x'beta_hat`` (broadcasting)."""
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    A_hat = np.asarray(A_hat, dtype=float)
    if np.any(D < 0) or np.any(A_hat < 0):
        raise DataError("variances must be non-negative")
    total = A_hat + D
    shape = np.broadcast(Y, synth, total).shape
    B = np.divide(D, total, out=np.ones(np.broadcast(D, total).shape), where=total > 0)
    theta = (1.0 - B) * Y + B * synth
    # D (1 - B) = A D / (A + D); computed this way it is exact at both limits.
    s2 = np.divide(A_hat * D, total, out=np.zeros(np.broadcast(D, total).shape), where=total > 0)
    sigma = np.broadcast_to(np.sqrt(s2), shape)
    degenerate = np.broadcast_to(s2 <= DEGENERATE_RATIO * total, shape)
    return FHPrediction(theta[()], np.broadcast_to(B, shape)[()], sigma[()], degenerate[()])
