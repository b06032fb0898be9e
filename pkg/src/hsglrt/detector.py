"""GLRT decision statistic, threshold calibration and sliding-window detection."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from hsglrt.errors import ConfigError, DataError
from hsglrt.estimators import ESTIMATORS, EstimateTrace, EstimatorConfig
from hsglrt.model import EndmemberLibrary, trial_seed
from hsglrt.io import HyperCube
from hsglrt.stats import (
    BackgroundContext,
    build_context,
    log_likelihood_h0_ctx,
    log_likelihood_h1,
    whiten,
)


@dataclass(frozen=True)
class DetectorConfig:
    estimator: str = "constrained"
    estimator_cfg: EstimatorConfig = field(default_factory=EstimatorConfig)
    bg_window: int = 55
    guard_window: int = 3
    threshold: float | None = None
    subsample: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        for name in ("bg_window", "guard_window"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {v}")
        if self.guard_window >= self.bg_window:
            raise ConfigError("guard_window must be smaller than bg_window")
        if self.subsample is not None and self.subsample < 1:
            raise ConfigError("subsample must be positive")

    @property
    def n_secondary(self) -> int:
        k = self.bg_window ** 2 - self.guard_window ** 2
        return k if self.subsample is None else min(k, self.subsample)

    def with_threshold(self, threshold) -> "DetectorConfig":
        return DetectorConfig(
            self.estimator, self.estimator_cfg, self.bg_window, self.guard_window,
            None if threshold is None else float(threshold), self.subsample, self.seed,
        )


@dataclass(frozen=True)
class DetectionResult:
    statistic: float
    alpha_hat: np.ndarray
    decision: bool | None
    trace: EstimateTrace
    pixel: tuple[int, int] | None = None
    valid: bool = True


def glrt_statistic(
    ctx: BackgroundContext,
    y,
    lib: EndmemberLibrary,
    cfg: DetectorConfig | None = None,
    pixel=None,
) -> DetectionResult:
    """Estimate abundances and return ``L1(alpha_hat) - L0``.

    ``decision`` is ``statistic > cfg.threshold``, or None when no
    threshold is configured.
    """
    cfg = cfg or DetectorConfig()
    wp = whiten(ctx, y, lib)
    trace = ESTIMATORS[cfg.estimator](wp, ctx, lib, cfg.estimator_cfg)
    stat = log_likelihood_h1(ctx, y, lib, trace.alpha_hat) - log_likelihood_h0_ctx(ctx, y)
    decision = None if cfg.threshold is None else bool(stat > cfg.threshold)
    return DetectionResult(stat, trace.alpha_hat, decision, trace, pixel, True)


def calibrate_threshold(h0_statistics, pfa: float) -> float:
    """Empirical ``(1 - pfa)`` quantile of H0 statistics.

    Returns the order statistic ``s[floor((1 - pfa) * M)]`` of the sorted
    sample (0-based, clipped to ``M - 1``): ``pfa = 0.05`` on ``1..100``
    gives 96, ``pfa = 0.5`` gives the upper median, and ``pfa -> 1`` the
    minimum. Detection uses ``statistic > threshold``.
    """
    s = np.sort(np.asarray(h0_statistics, dtype=float).reshape(-1))
    if s.size == 0:
        raise DataError("cannot calibrate on an empty sample")
    if not 0.0 < pfa < 1.0:
        raise ConfigError(f"pfa must lie in (0, 1), got {pfa}")
    if s.size < 1.0 / pfa:
        warnings.warn(
            f"{s.size} statistics are too few to resolve pfa={pfa:g}", stacklevel=2
        )
    idx = min(int(math.floor((1.0 - pfa) * s.size + 1e-9)), s.size - 1)
    return float(s[idx])


def annulus_offsets(bg_window: int, guard_window: int) -> np.ndarray:
    """(dr, dc) offsets of the background ring, row-major, guard square excluded."""
    h, g = bg_window // 2, guard_window // 2
    return np.array(
        [
            (dr, dc)
            for dr in range(-h, h + 1)
            for dc in range(-h, h + 1)
            if max(abs(dr), abs(dc)) > g
        ],
        dtype=int,
    )


@dataclass
class DetectionGrid:
    """Per-pixel detector outputs over a cube.

    ``processed`` marks pixels inside the requested region; of those,
    ``valid`` marks pixels whose background window fits in the image.
    """

    statistic: np.ndarray
    alpha_hat: np.ndarray
    decision: np.ndarray
    valid: np.ndarray
    processed: np.ndarray
    names: tuple[str, ...]
    threshold: float | None = None

    def apply_threshold(self, threshold: float) -> "DetectionGrid":
        decision = np.where(self.valid, self.statistic > threshold, False)
        return DetectionGrid(
            self.statistic, self.alpha_hat, decision, self.valid, self.processed,
            self.names, float(threshold),
        )

    def statistics(self, region=None) -> np.ndarray:
        """Valid statistics, optionally restricted to ``(r0, r1, c0, c1)``."""
        mask = self.valid.copy()
        if region is not None:
            mask &= _region_mask(mask.shape, region)
        return self.statistic[mask]


def _region_mask(shape, region) -> np.ndarray:
    r0, r1, c0, c1 = region
    m = np.zeros(shape, dtype=bool)
    m[max(r0, 0):min(r1, shape[0]), max(c0, 0):min(c1, shape[1])] = True
    return m


def secondary_for_pixel(data: np.ndarray, row: int, col: int, offsets: np.ndarray, cfg: DetectorConfig):
    """Background ring around ``(row, col)`` as an (N, K) matrix."""
    Z = data[row + offsets[:, 0], col + offsets[:, 1], :]
    if cfg.subsample is not None and cfg.subsample < len(offsets):
        rng = np.random.default_rng(trial_seed(cfg.seed, row, col))
        Z = Z[np.sort(rng.choice(len(offsets), cfg.subsample, replace=False))]
    return Z.T


def sliding_detect(cube, lib: EndmemberLibrary, cfg: DetectorConfig, region=None, threads: int = 1) -> DetectionGrid:
    """Run :func:`glrt_statistic` on every pixel of ``cube`` (or of ``region``).

    Each pixel's secondary data is the ``bg_window`` square around it minus
    the ``guard_window`` square (which contains the pixel itself). Pixels
    whose window leaves the image are marked invalid.
    """
    data = cube.data if isinstance(cube, HyperCube) else np.asarray(cube, dtype=float)
    rows, cols, bands = data.shape
    if bands != lib.n_bands:
        raise DataError(f"cube has {bands} bands, library {lib.n_bands}")
    if cfg.bg_window > min(rows, cols):
        raise DataError(f"{cfg.bg_window}-pixel window exceeds the {rows}x{cols} image")
    if cfg.n_secondary <= bands:
        raise ConfigError(
            f"window gives K={cfg.n_secondary} secondary pixels, need more than N={bands}"
        )
    processed = np.ones((rows, cols), bool) if region is None else _region_mask((rows, cols), region)
    h = cfg.bg_window // 2
    valid = np.zeros((rows, cols), bool)
    valid[h:rows - h, h:cols - h] = True
    valid &= processed
    statistic = np.full((rows, cols), np.nan)
    alpha = np.full((rows, cols, lib.r), np.nan)
    decision = np.zeros((rows, cols), bool)
    offsets = annulus_offsets(cfg.bg_window, cfg.guard_window)

    def run_row(r):
        for c in np.flatnonzero(valid[r]):
            ctx = build_context(secondary_for_pixel(data, r, c, offsets, cfg))
            res = glrt_statistic(ctx, data[r, c], lib, cfg, (r, int(c)))
            statistic[r, c] = res.statistic
            alpha[r, c] = res.alpha_hat
            decision[r, c] = bool(res.decision)

    work = [r for r in range(rows) if valid[r].any()]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run_row, work))
    else:
        for r in work:
            run_row(r)
    return DetectionGrid(statistic, alpha, decision, valid, processed, lib.names, cfg.threshold)


def false_alarm_rate(grid: DetectionGrid, reference=None, threshold=None, truth_mask=None) -> float:
    """Fraction of valid non-target pixels whose statistic is strictly above
    the reference pixel's statistic (or above ``threshold``).

    ``truth_mask`` marks target pixels to exclude; the reference pixel is
    always excluded.
    """
    if (reference is None) == (threshold is None):
        raise ConfigError("give exactly one of reference or threshold")
    background = grid.valid.copy()
    if truth_mask is not None:
        background &= ~np.asarray(truth_mask, dtype=bool)
    if reference is not None:
        r, c = reference
        if not (0 <= r < grid.valid.shape[0] and 0 <= c < grid.valid.shape[1]) or not grid.valid[r, c]:
            raise DataError(f"reference pixel {reference} has no valid statistic")
        level = grid.statistic[r, c]
        background[r, c] = False
    else:
        level = float(threshold)
    n = int(background.sum())
    if n == 0:
        raise DataError("no valid background pixels to count")
    return float(np.count_nonzero(grid.statistic[background] > level)) / n
