"""General linear mixed model ``Y = X beta + Z v + e`` and its covariance.

Three covariance families are supported:

* :class:`FayHerriot` -- area-level model with ``Z = I``, ``D(psi) = A I`` and
  known sampling variances ``R = diag(d)``.
* :class:`DiagonalVarianceComponents` -- ``R = s0 I`` and
  ``D = diag(s1 I_r1, ..., s_{k-1} I_r{k-1})`` (unbalanced ANOVA models).
* :class:`GeneralCallable` -- user supplied evaluators for ``D(psi)`` and ``R(psi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CholeskyError, CovarianceError, DataError, RankDeficientError

FLOOR_FACTOR = 1e-6


def _frozen(a, ndim=None, name="array"):
    a = np.array(a, dtype=float)
    if ndim is not None and a.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite values")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FayHerriot:
    """Known level-1 variances ``d``; ``psi = (A,)``."""

    d: np.ndarray

    def __post_init__(self):
        d = _frozen(self.d, 1, "d")
        if d.size == 0 or np.any(d <= 0):
            raise DataError("Fay-Herriot sampling variances must all be > 0")
        object.__setattr__(self, "d", d)

    @property
    def k(self) -> int:
        return 1

    @property
    def names(self) -> tuple[str, ...]:
        return ("A",)

    def D(self, psi) -> np.ndarray:
        return psi[0] * np.eye(self.d.size)

    def R(self, psi) -> np.ndarray:
        return np.diag(self.d)

    def r_diag(self, psi) -> np.ndarray:
        return np.asarray(self.d)


@dataclass(frozen=True)
class DiagonalVarianceComponents:
    """``psi = (s0, s1, ..., s_{k-1})`` with random-effect block sizes ``blocks``."""

    blocks: tuple[int, ...]
    n: int

    def __post_init__(self):
        blocks = tuple(int(b) for b in self.blocks)
        if not blocks or any(b < 1 for b in blocks):
            raise DataError("block sizes must be positive")
        object.__setattr__(self, "blocks", blocks)

    @property
    def k(self) -> int:
        return len(self.blocks) + 1

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f"sigma{j}^2" for j in range(self.k))

    def D(self, psi) -> np.ndarray:
        return np.diag(np.repeat(np.asarray(psi[1:], dtype=float), self.blocks))

    def R(self, psi) -> np.ndarray:
        return psi[0] * np.eye(self.n)

    def r_diag(self, psi) -> np.ndarray:
        return np.full(self.n, float(psi[0]))


@dataclass(frozen=True)
class GeneralCallable:
    """User supplied deterministic evaluators ``D_fn(psi)`` (q x q) and ``R_fn(psi)`` (n x n)."""

    D_fn: Callable[[np.ndarray], np.ndarray]
    R_fn: Callable[[np.ndarray], np.ndarray]
    k: int
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.names:
            object.__setattr__(self, "names", tuple(f"psi{j}" for j in range(self.k)))

    def D(self, psi) -> np.ndarray:
        return np.asarray(self.D_fn(np.asarray(psi, dtype=float)), dtype=float)

    def R(self, psi) -> np.ndarray:
        return np.asarray(self.R_fn(np.asarray(psi, dtype=float)), dtype=float)

    def r_diag(self, psi) -> np.ndarray:
        return np.diag(self.R(psi))


CovarianceFamily = FayHerriot | DiagonalVarianceComponents | GeneralCallable


@dataclass(frozen=True)
class ModelSpec:
    X: np.ndarray
    Z: np.ndarray
    cov: CovarianceFamily

    def __post_init__(self):
        X = _frozen(self.X, 2, "X")
        Z = _frozen(self.Z, 2, "Z")
        n, p = X.shape
        if Z.shape[0] != n:
            raise DataError(f"Z has {Z.shape[0]} rows, X has {n}")
        if Z.shape[1] < 1:
            raise DataError("Z must have at least one column")
        if n < p + 1:
            raise DataError(f"need n >= p + 1 observations, got n={n}, p={p}")
        if np.linalg.matrix_rank(X) < p:
            raise RankDeficientError("X does not have full column rank")
        if isinstance(self.cov, FayHerriot):
            if self.cov.d.size != n or not np.array_equal(Z, np.eye(n)):
                raise DataError("Fay-Herriot model needs Z = I_n and one variance per row")
        elif isinstance(self.cov, DiagonalVarianceComponents):
            if self.cov.n != n or sum(self.cov.blocks) != Z.shape[1]:
                raise DataError("block sizes must sum to the number of columns of Z")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @classmethod
    def fay_herriot(cls, X, d) -> "ModelSpec":
        d = np.asarray(d, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return cls(X, np.eye(d.size), FayHerriot(d))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def k(self) -> int:
        return self.cov.k

    @property
    def is_fay_herriot(self) -> bool:
        return isinstance(self.cov, FayHerriot)

    def floor(self, psi=None) -> float:
        """Variance floor ``1e-6 * median(diag R(psi))``."""
        if self.is_fay_herriot:
            scale = float(np.median(self.cov.d))
        else:
            scale = float(np.median(self.cov.r_diag(psi)))
        # R itself may be estimated to be degenerate; fall back to an absolute floor.
        return FLOOR_FACTOR * scale if scale > 0 else FLOOR_FACTOR


@dataclass(frozen=True)
class Parameters:
    beta: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(np.atleast_1d(self.beta), 1, "beta"))
        object.__setattr__(self, "psi", _frozen(np.atleast_1d(self.psi), 1, "psi"))


@dataclass(frozen=True)
class MixedTarget:
    """Weights ``c`` defining ``T = c'(X beta + Z v)``."""

    c: np.ndarray = field()

    def __post_init__(self):
        object.__setattr__(self, "c", _frozen(self.c, 1, "c"))

    @classmethod
    def unit(cls, n: int, i: int) -> "MixedTarget":
        c = np.zeros(n)
        c[i] = 1.0
        return cls(c)

    def unit_index(self) -> int | None:
        """Index ``i`` when ``c = e_i``, otherwise None."""
        nz = np.flatnonzero(self.c)
        if nz.size == 1 and self.c[nz[0]] == 1.0:
            return int(nz[0])
        return None


def chol_factor(M) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DataError(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if not np.allclose(M, M.T, rtol=0, atol=1e-10 * scale):
        raise DataError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    for j in range(1, M.shape[0] + 1):
        try:
            np.linalg.cholesky(M[:j, :j])
        except np.linalg.LinAlgError:
            raise CholeskyError(j) from None
    raise CholeskyError(M.shape[0])


def _check_psi(spec: ModelSpec, psi) -> np.ndarray:
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    if psi.shape != (spec.k,):
        raise DataError(f"psi must have {spec.k} components, got {psi.shape}")
    if not np.all(np.isfinite(psi)):
        raise DataError("psi contains non-finite values")
    if not isinstance(spec.cov, GeneralCallable):
        for name, value in zip(spec.cov.names, psi):
            if value <= 0:
                raise CovarianceError(
                    name, f"variance component {name} = {value:g} is not positive"
                )
    return psi


def build_sigma(spec: ModelSpec, psi) -> np.ndarray:
    """Marginal dispersion ``R(psi) + Z D(psi) Z'``; raises if not SPD."""
    psi = _check_psi(spec, psi)
    if spec.is_fay_herriot:
        return np.diag(psi[0] + spec.cov.d)
    Dm = spec.cov.D(psi)
    Rm = spec.cov.R(psi)
    S = Rm + spec.Z @ Dm @ spec.Z.T
    S = 0.5 * (S + S.T)
    try:
        chol_factor(S)
    except CholeskyError as err:
        raise CovarianceError(
            None, f"Sigma(psi) is not positive definite at psi={psi.tolist()}: {err}"
        ) from err
    return S


def _factors(spec: ModelSpec, psi):
    """Square-root factors of D(psi) and R(psi), diagonal vectors for Fay-Herriot."""
    psi = _check_psi(spec, psi)
    if spec.is_fay_herriot:
        return np.full(spec.n, np.sqrt(psi[0])), np.sqrt(spec.cov.d)
    out = []
    for label, M in (("D", spec.cov.D(psi)), ("R", spec.cov.R(psi))):
        try:
            out.append(chol_factor(M))
        except CholeskyError as err:
            raise CovarianceError(label, f"{label}(psi) is not positive definite: {err}") from err
    return tuple(out)


def sample_outcome(spec: ModelSpec, params: Parameters, rng, size: int | None = None):
    """Draw ``(Y, v)`` from the model.

    The standard normals are drawn as one block of ``q + n`` values per
    outcome (random effects first), so the Fay-Herriot diagonal path and the
    dense path consume identical draws.  With ``size`` given, returns arrays
    of shape ``(size, n)`` and ``(size, q)``.
    """
    from .rng import as_generator

    rng = as_generator(rng)
    LD, LR = _factors(spec, params.psi)
    shape = (spec.q + spec.n,) if size is None else (size, spec.q + spec.n)
    z = rng.standard_normal(shape)
    zv, ze = z[..., : spec.q], z[..., spec.q :]
    if LD.ndim == 1:
        v = zv * LD
        e = ze * LR
    else:
        v = zv @ LD.T
        e = ze @ LR.T
    mean = spec.X @ params.beta
    if spec.is_fay_herriot:
        Y = mean + v + e
    else:
        Y = mean + v @ spec.Z.T + e
    return Y, v
