"""Secondary-data statistics and compressed log-likelihoods.

``Z`` denotes the (N, K) matrix of secondary (target-free) pixels, ``y``
the pixel under test. With ``z_sum = Z @ 1`` the scatter matrices are::

    S  = Z Z^T - z_sum z_sum^T / (K + 1)
    S1 = S - z_sum z_sum^T / (K (K + 1))    # == centered scatter of Z

Whitening uses any ``W`` with ``W^T W = S1^{-1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from hsglrt.errors import DataError, DomainError, SingularStatisticsError
from hsglrt.model import EndmemberLibrary, validate_abundances

_PIVOT_RTOL = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class BackgroundContext:
    z_sum: np.ndarray
    z_mean: np.ndarray
    S: np.ndarray
    S1: np.ndarray
    W: np.ndarray
    K: int
    logdet_S1: float

    @property
    def N(self) -> int:
        return self.z_sum.size

    @property
    def C1(self) -> float:
        return (self.K + 1) * self.N / 2.0 * _LOG_2PI

    @property
    def C2(self) -> float:
        return (self.K + 1) / 2.0

    @property
    def C3(self) -> float:
        return self.C1 + (self.K + 1) * self.N / 2.0 - self.C2 * self.N * math.log(self.K + 1)

    @property
    def C4(self) -> float:
        return self.K / (self.K + 1.0)


@dataclass(frozen=True)
class WhitenedProblem:
    """Pixel, library and secondary mean mapped by ``sqrt(C4) * W``."""

    y0: np.ndarray
    T0: np.ndarray
    z0: np.ndarray

    @property
    def r(self) -> int:
        return self.T0.shape[1]


def _as_secondary(secondary) -> np.ndarray:
    Z = np.asarray(secondary, dtype=float)
    if Z.ndim != 2:
        raise DataError("secondary data must be an (N, K) matrix")
    if not np.all(np.isfinite(Z)):
        raise DataError("secondary data must be finite")
    N, K = Z.shape
    if K <= N:
        raise SingularStatisticsError(
            f"need more secondary pixels than bands (K={K}, N={N})"
        )
    return Z


def _checked_cholesky(M: np.ndarray, what: str) -> np.ndarray:
    n = M.shape[0]
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SingularStatisticsError(f"{what} is not positive-definite") from exc
    pivots = np.diag(L) ** 2
    floor = _PIVOT_RTOL * np.trace(M) / n
    if not np.all(pivots > floor):
        raise SingularStatisticsError(
            f"{what} is numerically singular (min pivot {pivots.min():.3g})"
        )
    return L


def _logdet_pd(M: np.ndarray, what: str) -> float:
    L = _checked_cholesky(M, what)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def build_context(secondary, whitening: str = "cholesky") -> BackgroundContext:
    """Sample statistics of the secondary data.

    Parameters
    ----------
    secondary : array_like, shape (N, K)
        Target-free pixels, one per column, ``K > N``.
    whitening : {"cholesky", "symmetric"}
        Which square-root factor of ``S1^{-1}`` to store as ``W``.

    Raises
    ------
    SingularStatisticsError
        If ``K <= N`` or ``S1`` fails the positive-definiteness test.
    """
    Z = _as_secondary(secondary)
    N, K = Z.shape
    z_sum = Z.sum(axis=1)
    z_mean = z_sum / K
    Zc = Z - z_mean[:, None]
    S1 = Zc @ Zc.T
    S1 = 0.5 * (S1 + S1.T)
    S = S1 + np.outer(z_sum, z_sum) / (K * (K + 1.0))
    L = _checked_cholesky(S1, "secondary-data scatter S1")
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    if whitening == "cholesky":
        W = solve_triangular(L, np.eye(N), lower=True)
    elif whitening == "symmetric":
        evals, evecs = np.linalg.eigh(S1)
        W = (evecs / np.sqrt(evals)) @ evecs.T
    else:
        raise ValueError(f"unknown whitening {whitening!r}")
    return BackgroundContext(z_sum, z_mean, S, S1, W, K, logdet)


def whiten(ctx: BackgroundContext, y, lib: EndmemberLibrary) -> WhitenedProblem:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != ctx.N or lib.n_bands != ctx.N:
        raise DataError(
            f"band mismatch: pixel {y.size}, library {lib.n_bands}, context {ctx.N}"
        )
    s = math.sqrt(ctx.C4)
    return WhitenedProblem(
        s * (ctx.W @ y), s * (ctx.W @ lib.signatures), s * (ctx.W @ ctx.z_mean)
    )


def mle_h0(y, secondary):
    """Mean and covariance maximizing the joint density of ``y`` and ``Z`` under H0."""
    Z = _as_secondary(secondary)
    y = np.asarray(y, dtype=float).reshape(-1)
    K = Z.shape[1]
    mu = (y + Z.sum(axis=1)) / (K + 1)
    D = np.column_stack([y - mu, Z - mu[:, None]])
    return mu, D @ D.T / (K + 1)


def mle_h1(y, secondary, lib: EndmemberLibrary, alpha):
    """Maximizers over mean and covariance under H1 at fixed abundances."""
    Z = _as_secondary(secondary)
    a = validate_abundances(alpha, lib.r)
    A = 1.0 - a.sum()
    xa = (np.asarray(y, dtype=float).reshape(-1) - lib.signatures @ a) / A
    K = Z.shape[1]
    mu = (xa + Z.sum(axis=1)) / (K + 1)
    D = np.column_stack([xa - mu, Z - mu[:, None]])
    return mu, D @ D.T / (K + 1)


def log_likelihood_h0(y, secondary) -> float:
    """Compressed H0 log-likelihood ``-C1 - C2 log det(M0) - N C2``.

    Evaluated directly from the data, without a :class:`BackgroundContext`.
    """
    Z = _as_secondary(secondary)
    N, K = Z.shape
    _, M0 = mle_h0(y, Z)
    c2 = (K + 1) / 2.0
    c1 = (K + 1) * N / 2.0 * _LOG_2PI
    return -c1 - c2 * _logdet_pd(M0, "H0 covariance estimate") - N * c2


def log_likelihood_h0_ctx(ctx: BackgroundContext, y) -> float:
    """Same value as :func:`log_likelihood_h0`, from precomputed statistics.

    Uses ``(K+1) M0 = S1 + C4 d d^T`` with ``d = y - z_mean``.
    """
    d = ctx.W @ (np.asarray(y, dtype=float).reshape(-1) - ctx.z_mean)
    logdet_m0 = (
        ctx.logdet_S1 + math.log1p(ctx.C4 * float(d @ d)) - ctx.N * math.log(ctx.K + 1)
    )
    return -ctx.C1 - ctx.C2 * logdet_m0 - ctx.N * ctx.C2


def _background_fraction(alpha, r: int) -> tuple[np.ndarray, float]:
    a = np.asarray(alpha, dtype=float).reshape(-1)
    if a.size != r:
        raise DataError(f"expected {r} abundances, got {a.size}")
    A = 1.0 - float(a.sum())
    if not A > 0.0:
        raise DomainError(f"abundance sum {1.0 - A:.12g} must be < 1")
    return a, A


def log_likelihood_h1(ctx: BackgroundContext, y, lib: EndmemberLibrary, alpha) -> float:
    """Partially-compressed H1 log-likelihood at fixed abundances."""
    a, A = _background_fraction(alpha, lib.r)
    y = np.asarray(y, dtype=float).reshape(-1)
    v = ctx.W @ ((y - lib.signatures @ a) / A - ctx.z_mean)
    return (
        -ctx.C3
        - ctx.N * math.log(A)
        - ctx.C2 * ctx.logdet_S1
        - ctx.C2 * math.log1p(ctx.C4 * float(v @ v))
    )


def log_likelihood_h1_direct(y, secondary, lib: EndmemberLibrary, alpha) -> float:
    """H1 log-likelihood via the determinant of the full scatter about the H1 mean.

    Independent of :func:`build_context`; used to cross-check
    :func:`log_likelihood_h1`.
    """
    Z = _as_secondary(secondary)
    N, K = Z.shape
    a, A = _background_fraction(alpha, lib.r)
    _, M = mle_h1(y, Z, lib, a)
    c2 = (K + 1) / 2.0
    c3 = (K + 1) * N / 2.0 * _LOG_2PI + (K + 1) * N / 2.0 - c2 * N * math.log(K + 1)
    scatter = (K + 1) * M
    return -c3 - N * math.log(A) - c2 * _logdet_pd(scatter, "H1 scatter")


def g_objective(wp: WhitenedProblem, ctx: BackgroundContext, alpha) -> float:
    """Abundance-dependent part of the H1 log-likelihood (to be minimized).

    ``log_likelihood_h1 == -C3 - C2 log det(S1) - g``.
    """
    a, A = _background_fraction(alpha, wp.r)
    v = (wp.y0 - wp.T0 @ a) / A - wp.z0
    return ctx.N * math.log(A) + ctx.C2 * math.log1p(float(v @ v))


def check_appendix_identity(secondary, y, lib: EndmemberLibrary, alpha, ctx=None):
    """Both sides of the rank-one determinant identity behind ``log_likelihood_h1``.

    ``lhs`` is the determinant of the scatter about the H1 mean computed
    from the raw data; ``rhs`` is ``det(S1) * (1 + C4 * q)`` with the
    quadratic form ``q`` taken from ``ctx``. Raw determinants, so keep N
    small.
    """
    Z = _as_secondary(secondary)
    if ctx is None:
        ctx = build_context(Z)
    a, A = _background_fraction(alpha, lib.r)
    xa = (np.asarray(y, dtype=float).reshape(-1) - lib.signatures @ a) / A
    K = Z.shape[1]
    mu = (xa + Z.sum(axis=1)) / (K + 1)
    D = np.column_stack([xa - mu, Z - mu[:, None]])
    lhs = float(np.linalg.det(D @ D.T))
    d = xa - ctx.z_sum / K
    q = float(d @ np.linalg.solve(ctx.S1, d))
    rhs = float(np.linalg.det(ctx.S1)) * (1.0 + ctx.C4 * q)
    return lhs, rhs


def log_density_h0(y, secondary, mu, M) -> float:
    """Joint Gaussian log-density of ``y`` and the secondary data under H0."""
    Z = _as_secondary(secondary)
    y = np.asarray(y, dtype=float).reshape(-1)
    D = np.column_stack([y - mu, Z - np.asarray(mu)[:, None]])
    return _joint_logpdf(D, M, 0.0)


def log_density_h1(y, secondary, mu, M, lib: EndmemberLibrary, alpha) -> float:
    """Joint log-density under H1: ``y - T alpha ~ N(A mu, A^2 M)``."""
    Z = _as_secondary(secondary)
    a, A = _background_fraction(alpha, lib.r)
    x = np.asarray(y, dtype=float).reshape(-1) - lib.signatures @ a
    D = np.column_stack([(x - A * np.asarray(mu)) / A, Z - np.asarray(mu)[:, None]])
    return _joint_logpdf(D, M, Z.shape[0] * math.log(A))


def _joint_logpdf(D: np.ndarray, M, log_jacobian: float) -> float:
    N, n = D.shape
    L = np.linalg.cholesky(np.asarray(M, dtype=float))
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    V = solve_triangular(L, D, lower=True)
    return -n * N / 2.0 * _LOG_2PI - n / 2.0 * logdet - 0.5 * float(np.sum(V * V)) - log_jacobian
