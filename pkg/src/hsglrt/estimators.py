"""Abundance estimation by cyclic coordinate minimization of ``g``.

Two procedures share the per-coordinate decomposition

    g(alpha_j) = N log(a_j - alpha_j)
                 + C2 log(1 + ||(y_j - t_j alpha_j) / (a_j - alpha_j) - z0||^2)

where ``a_j = 1 - sum_{i != j} alpha_i`` and ``y_j = y0 - sum_{i != j} t_i alpha_i``
(all vectors in the whitened domain):

* ``estimate_heuristic`` takes the admissible root of the stationarity
  quadratic for each coordinate, then rescales the sweep result so the
  background abundance lies on a grid, keeping the grid value with the
  lowest ``g``.
* ``estimate_constrained`` introduces ``beta_j = a_j - alpha_j``, eliminates
  the Lagrange multiplier of the two stationarity equations and brackets
  the roots of their difference on ``(0, a_j)``.

``estimate_oracle`` is an exhaustive grid search used for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from hsglrt.errors import ConfigError, DomainError
from hsglrt.model import EPS_SUM, EndmemberLibrary, validate_abundances
from hsglrt.stats import BackgroundContext, WhitenedProblem, g_objective

CONVERGENCE_THRESHOLD = 1e-2


@dataclass(frozen=True)
class EstimatorConfig:
    n_iter: int = 15
    alpha_init: object = "uniform"
    bg_grid: tuple[float, float, float] = (0.1, 0.9, 0.01)
    root_grid_points: int = 2048
    root_tol: float = 1e-12
    # Also offer the unscaled sweep result to the background-grid search.
    keep_sweep: bool = True

    def __post_init__(self):
        if int(self.n_iter) < 1:
            raise ConfigError("n_iter must be >= 1")
        start, stop, step = (float(v) for v in self.bg_grid)
        if not (0.0 <= start < stop < 1.0) or not step > 0.0:
            raise ConfigError(f"invalid background grid {self.bg_grid}")
        if int(self.root_grid_points) < 2:
            raise ConfigError("root_grid_points must be >= 2")
        if not self.root_tol > 0.0:
            raise ConfigError("root_tol must be positive")
        if not (isinstance(self.alpha_init, str) and self.alpha_init == "uniform"):
            if isinstance(self.alpha_init, str):
                raise ConfigError(f"unknown alpha_init {self.alpha_init!r}")
            object.__setattr__(
                self, "alpha_init", tuple(validate_abundances(self.alpha_init))
            )
        object.__setattr__(self, "bg_grid", (start, stop, step))

    def initial_alpha(self, r: int) -> np.ndarray:
        if isinstance(self.alpha_init, str):
            return np.full(r, 1.0 / (2 * r))
        return validate_abundances(self.alpha_init, r)

    def background_grid(self) -> np.ndarray:
        start, stop, step = self.bg_grid
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return start + step * np.arange(n)


@dataclass(frozen=True)
class EstimateTrace:
    """Estimator output plus its per-iteration H1 log-likelihood history.

    ``l1_per_iteration[0]`` is the value at the initial abundances;
    ``delta_l1[h]`` is the relative change between iterations ``h - 1``
    and ``h`` (``delta_l1[0]`` is NaN).
    """

    alpha_hat: np.ndarray
    l1_per_iteration: np.ndarray
    delta_l1: np.ndarray
    iterations_run: int
    converged: bool


def relative_changes(l1) -> np.ndarray:
    l1 = np.asarray(l1, dtype=float)
    out = np.full(l1.shape, np.nan)
    out[1:] = np.abs((l1[1:] - l1[:-1]) / l1[1:])
    return out


def _l1_from_g(ctx: BackgroundContext, g: float) -> float:
    return -ctx.C3 - ctx.C2 * ctx.logdet_S1 - g


def _finish(ctx, alpha, g_values) -> EstimateTrace:
    l1 = np.array([_l1_from_g(ctx, g) for g in g_values])
    delta = relative_changes(l1)
    alpha = np.array(alpha)
    alpha.setflags(write=False)
    return EstimateTrace(
        alpha_hat=alpha,
        l1_per_iteration=l1,
        delta_l1=delta,
        iterations_run=len(g_values) - 1,
        converged=bool(np.any(delta[1:] < CONVERGENCE_THRESHOLD)),
    )


# ---------------------------------------------------------------------------
# Per-coordinate quantities
# ---------------------------------------------------------------------------

def coordinate_context(wp: WhitenedProblem, alpha, j: int):
    """Slack ``a_j`` and partial residual ``y_j`` for coordinate ``j``."""
    a = np.asarray(alpha, dtype=float)
    if not 0 <= j < wp.r:
        raise IndexError(f"coordinate {j} out of range for r={wp.r}")
    others = a.sum() - a[j]
    a_hat = 1.0 - others
    if a_hat <= 0.0:
        raise DomainError(f"coordinate {j} has no slack (a_hat={a_hat:.3g})")
    y_j = wp.y0 - wp.T0 @ a + wp.T0[:, j] * a[j]
    return a_hat, y_j


@dataclass(frozen=True)
class _Dots:
    """Inner products among ``y_j``, ``t_j`` and ``z0``."""

    yy: float
    yt: float
    yz: float
    tt: float
    tz: float
    zz: float

    @classmethod
    def of(cls, y_j, t, z0):
        return cls(
            float(y_j @ y_j), float(y_j @ t), float(y_j @ z0),
            float(t @ t), float(t @ z0), float(z0 @ z0),
        )

    def p(self, alpha: float, beta: float) -> float:
        """``beta^2 + ||y_j - t alpha - beta z0||^2``."""
        return (
            beta * beta * (1.0 + self.zz)
            + self.yy
            + alpha * alpha * self.tt
            - 2.0 * alpha * self.yt
            - 2.0 * beta * self.yz
            + 2.0 * alpha * beta * self.tz
        )


def coordinate_objective(ctx: BackgroundContext, dots: _Dots, alpha_j, beta_j):
    """``g(alpha_j, beta_j)``; with ``beta_j = a_j - alpha_j`` this is ``g`` along coordinate j."""
    p = dots.p(alpha_j, beta_j)
    return (ctx.N - 2.0 * ctx.C2) * math.log(beta_j) + ctx.C2 * math.log(p)


def heuristic_coefficients(wp: WhitenedProblem, a_hat: float, y_j, j: int):
    """``(D0, D1, D2)`` with ``D0 + D1 a + D2 a^2 = ||y_j - t a - (a_hat - a) z0||^2 + (a_hat - a)^2``."""
    d = _Dots.of(y_j, wp.T0[:, j], wp.z0)
    D0 = d.yy - 2.0 * a_hat * d.yz + a_hat * a_hat * d.zz + a_hat * a_hat
    D1 = 2.0 * (a_hat * (d.tz - d.zz) + d.yz - d.yt) - 2.0 * a_hat
    D2 = 1.0 + d.tt - 2.0 * d.tz + d.zz
    return D0, D1, D2


def heuristic_quadratic(ctx: BackgroundContext, a_hat: float, D0, D1, D2):
    """Coefficients ``(c2, c1, c0)`` of the stationarity quadratic in ``alpha_j``."""
    N, C2 = ctx.N, ctx.C2
    return (
        -N * D2,
        2.0 * C2 * D2 * a_hat + (C2 - N) * D1,
        C2 * D1 * a_hat + 2.0 * D0 * C2 - N * D0,
    )


def _quadratic_roots(c2: float, c1: float, c0: float) -> list[float]:
    if c2 == 0.0:
        return [] if c1 == 0.0 else [-c0 / c1]
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < 0.0:
        return []
    q = -0.5 * (c1 + math.copysign(math.sqrt(disc), c1))
    roots = [q / c2]
    if q != 0.0:
        roots.append(c0 / q)
    return roots


def heuristic_step(wp: WhitenedProblem, ctx: BackgroundContext, a_hat: float, y_j, j: int) -> float:
    """Best admissible root of the stationarity quadratic, or 0 if none."""
    D0, D1, D2 = heuristic_coefficients(wp, a_hat, y_j, j)
    roots = _quadratic_roots(*heuristic_quadratic(ctx, a_hat, D0, D1, D2))
    hi = a_hat - EPS_SUM
    admissible = sorted(x for x in roots if 0.0 <= x <= hi)
    if not admissible:
        return 0.0
    dots = _Dots.of(y_j, wp.T0[:, j], wp.z0)
    best, best_g = 0.0, math.inf
    for x in admissible:
        gx = coordinate_objective(ctx, dots, x, a_hat - x)
        if gx < best_g:
            best, best_g = x, gx
    return best


def lagrange_multipliers(ctx: BackgroundContext, dots: _Dots, alpha_j, beta_j):
    """Multiplier implied by each stationarity equation, ``(lambda_alpha, lambda_beta)``.

    The first solves
    ``lam A1 a^2 + (lam A2 - 2 C2 A1) a + lam A3 - C2 A2 = 0``;
    the second solves
    ``-lam B1 b^3 + (N B1 - lam B2) b^2 + (N B2 - C2 B2 - lam B3) b + N B3 - 2 C2 B3 = 0``.
    Works elementwise on arrays.
    """
    N, C2 = ctx.N, ctx.C2
    a, b = alpha_j, beta_j
    A1 = dots.tt
    A2 = 2.0 * (b * dots.tz - dots.yt)
    A3 = b * b * (1.0 + dots.zz) - 2.0 * b * dots.yz + dots.yy
    B1 = 1.0 + dots.zz
    B2 = 2.0 * (a * dots.tz - dots.yz)
    B3 = dots.yy - 2.0 * a * dots.yt + a * a * dots.tt
    p = A1 * a * a + A2 * a + A3
    lam_a = C2 * (2.0 * A1 * a + A2) / p
    lam_b = (N * B1 * b * b + (N - C2) * B2 * b + (N - 2.0 * C2) * B3) / (b * p)
    return lam_a, lam_b


def lagrange_residuals(ctx: BackgroundContext, dots: _Dots, alpha_j, beta_j, lam):
    """Residuals of the two stationarity equations, each divided by its largest term."""
    N, C2 = ctx.N, ctx.C2
    a, b = alpha_j, beta_j
    A1 = dots.tt
    A2 = 2.0 * (b * dots.tz - dots.yt)
    A3 = b * b * (1.0 + dots.zz) - 2.0 * b * dots.yz + dots.yy
    B1 = 1.0 + dots.zz
    B2 = 2.0 * (a * dots.tz - dots.yz)
    B3 = dots.yy - 2.0 * a * dots.yt + a * a * dots.tt
    t1 = [lam * A1 * a * a, (lam * A2 - 2 * C2 * A1) * a, lam * A3 - C2 * A2]
    t2 = [
        -lam * B1 * b ** 3,
        (N * B1 - lam * B2) * b * b,
        (N * B2 - C2 * B2 - lam * B3) * b,
        N * B3 - 2 * C2 * B3,
    ]
    scale1 = max(abs(lam * A1 * a * a), abs(lam * A2 * a), abs(2 * C2 * A1 * a),
                 abs(lam * A3), abs(C2 * A2))
    scale2 = max(abs(lam * B1 * b ** 3), abs(N * B1 * b * b), abs(lam * B2 * b * b),
                 abs(N * B2 * b), abs(C2 * B2 * b), abs(lam * B3 * b), abs(N * B3),
                 abs(2 * C2 * B3))
    return abs(sum(t1)) / scale1, abs(sum(t2)) / scale2


def _multiplier_gap(ctx, dots, a_hat, alpha):
    lam_a, lam_b = lagrange_multipliers(ctx, dots, alpha, a_hat - alpha)
    return lam_a - lam_b


def constrained_step(
    wp: WhitenedProblem,
    ctx: BackgroundContext,
    a_hat: float,
    y_j,
    j: int,
    cfg: EstimatorConfig,
) -> float:
    """Minimize ``g(alpha_j, a_hat - alpha_j)`` over ``[0, a_hat - EPS_SUM]``.

    Stationary points are the roots of ``lambda_alpha - lambda_beta``; they
    are bracketed on a uniform grid and refined by bisection. The
    candidate with the lowest objective wins, ties going to the smaller
    value, and ``alpha_j = 0`` is always a candidate.
    """
    hi = a_hat - EPS_SUM
    if hi <= 0.0:
        return 0.0
    dots = _Dots.of(y_j, wp.T0[:, j], wp.z0)
    grid = np.linspace(0.0, hi, int(cfg.root_grid_points))
    gap = _multiplier_gap(ctx, dots, a_hat, grid)
    sign = np.sign(gap)
    candidates = [0.0]
    for i in np.flatnonzero(sign[:-1] * sign[1:] < 0):
        lo, up = float(grid[i]), float(grid[i + 1])
        f_lo = float(gap[i])
        while up - lo > cfg.root_tol:
            mid = 0.5 * (lo + up)
            f_mid = _multiplier_gap(ctx, dots, a_hat, mid)
            if f_mid == 0.0:
                lo = up = mid
                break
            if (f_mid < 0.0) == (f_lo < 0.0):
                lo, f_lo = mid, f_mid
            else:
                up = mid
        candidates.append(0.5 * (lo + up))
    candidates.extend(float(x) for x in grid[sign == 0.0])
    candidates.append(hi)
    best, best_g = 0.0, math.inf
    for x in sorted(candidates):
        gx = coordinate_objective(ctx, dots, x, a_hat - x)
        if gx < best_g:
            best, best_g = x, gx
    return best


# ---------------------------------------------------------------------------
# Full estimators
# ---------------------------------------------------------------------------

class _GramObjective:
    """``g`` for many abundance vectors at once via an r x r Gram matrix."""

    def __init__(self, wp: WhitenedProblem, ctx: BackgroundContext):
        u = wp.y0 - wp.z0
        V = wp.T0 - wp.z0[:, None]
        self.uu = float(u @ u)
        self.Vu = V.T @ u
        self.G = V.T @ V
        self.N = ctx.N
        self.C2 = ctx.C2

    def __call__(self, alphas: np.ndarray) -> np.ndarray:
        alphas = np.atleast_2d(alphas)
        A = 1.0 - alphas.sum(axis=1)
        quad = (
            self.uu
            - 2.0 * alphas @ self.Vu
            + np.einsum("mi,ij,mj->m", alphas, self.G, alphas)
        )
        quad = np.maximum(quad, 0.0)
        return self.N * np.log(A) + self.C2 * np.log1p(quad / (A * A))


def _sweep(wp, ctx, alpha, step):
    alpha = alpha.copy()
    for j in range(wp.r):
        a_hat, y_j = coordinate_context(wp, alpha, j)
        if a_hat <= EPS_SUM:
            alpha[j] = 0.0
            continue
        alpha[j] = step(a_hat, y_j, j)
    return alpha


def normalize_to_grid(wp, ctx, alpha_tilde, bg_values, keep_sweep: bool = True) -> np.ndarray:
    """Rescale ``alpha_tilde`` to sum ``1 - alpha_b``, ``alpha_b`` chosen from ``bg_values`` by ``g``.

    With ``keep_sweep`` the unscaled ``alpha_tilde`` competes as one more
    candidate, so the rescaling never makes the sweep result worse.
    Every candidate is a multiple of ``alpha_tilde``; ratios are preserved.
    """
    total = float(np.sum(alpha_tilde))
    if total <= 0.0:
        return np.zeros_like(alpha_tilde)
    scales = 1.0 - np.asarray(bg_values, dtype=float)
    if keep_sweep:
        scales = np.append(scales, total)
    candidates = np.outer(scales, alpha_tilde / total)
    values = _GramObjective(wp, ctx)(candidates)
    return candidates[int(np.argmin(values))]


def estimate_heuristic(
    wp: WhitenedProblem,
    ctx: BackgroundContext,
    lib: EndmemberLibrary | None = None,
    cfg: EstimatorConfig | None = None,
) -> EstimateTrace:
    """Cyclic quadratic-root updates followed by background-grid rescaling."""
    cfg = cfg or EstimatorConfig()
    alpha = cfg.initial_alpha(wp.r)
    bg_values = cfg.background_grid()
    g_values = [g_objective(wp, ctx, alpha)]

    def step(a_hat, y_j, j):
        return heuristic_step(wp, ctx, a_hat, y_j, j)

    for _ in range(int(cfg.n_iter)):
        alpha_tilde = _sweep(wp, ctx, alpha, step)
        alpha = normalize_to_grid(wp, ctx, alpha_tilde, bg_values, cfg.keep_sweep)
        validate_abundances(alpha, wp.r)
        g_values.append(g_objective(wp, ctx, alpha))
    return _finish(ctx, alpha, g_values)


def estimate_constrained(
    wp: WhitenedProblem,
    ctx: BackgroundContext,
    lib: EndmemberLibrary | None = None,
    cfg: EstimatorConfig | None = None,
) -> EstimateTrace:
    """Cyclic Lagrange-constrained coordinate minimization (no rescaling)."""
    cfg = cfg or EstimatorConfig()
    alpha = cfg.initial_alpha(wp.r)
    g_values = [g_objective(wp, ctx, alpha)]

    def step(a_hat, y_j, j):
        return constrained_step(wp, ctx, a_hat, y_j, j, cfg)

    for _ in range(int(cfg.n_iter)):
        alpha = _sweep(wp, ctx, alpha, step)
        validate_abundances(alpha, wp.r)
        g_values.append(g_objective(wp, ctx, alpha))
    return _finish(ctx, alpha, g_values)


ESTIMATORS = {"heuristic": estimate_heuristic, "constrained": estimate_constrained}

_ORACLE_MAX_R = 3


def _grid_axis(grid_step: float) -> np.ndarray:
    n = int(math.floor((1.0 - EPS_SUM) / grid_step + 1e-9))
    return grid_step * np.arange(n + 1)


def _oracle_slices(r: int, grid_step: float):
    """Feasible grid points in slices of fixed first coordinate."""
    axis = _grid_axis(grid_step)
    if r == 1:
        yield axis[:, None]
        return
    rest = np.stack(np.meshgrid(*([axis] * (r - 1)), indexing="ij"), axis=-1).reshape(-1, r - 1)
    rest_sum = rest.sum(axis=1)
    for a0 in axis:
        keep = rest[rest_sum + a0 <= 1.0 - EPS_SUM]
        if len(keep):
            yield np.column_stack([np.full(len(keep), a0), keep])


def oracle_grid(r: int, grid_step: float) -> np.ndarray:
    """All points ``k * grid_step`` (per coordinate) of the constrained simplex."""
    return np.concatenate(list(_oracle_slices(r, grid_step)))


def estimate_oracle(
    wp: WhitenedProblem,
    ctx: BackgroundContext,
    lib: EndmemberLibrary | None = None,
    grid_step: float = 1e-2,
) -> np.ndarray:
    """Exhaustive grid minimizer of ``g`` (verification only; r <= 3)."""
    if wp.r > _ORACLE_MAX_R:
        raise ConfigError(f"grid oracle supports r <= {_ORACLE_MAX_R}, got {wp.r}")
    if not 0.0 < grid_step < 1.0:
        raise ConfigError("grid_step must lie in (0, 1)")
    objective = _GramObjective(wp, ctx)
    best, best_g = None, math.inf
    for chunk in _oracle_slices(wp.r, grid_step):
        values = objective(chunk)
        i = int(np.argmin(values))
        if values[i] < best_g:
            best, best_g = chunk[i], float(values[i])
    return np.array(best)
