"""Monte-Carlo trials over simulated Gaussian scenes.

Trial ``i`` of abundance row ``row`` in stream ``stream`` draws its scene
from ``trial_seed(scene.seed, stream, row, i)``, so results do not depend
on the thread count or on which other rows are run.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from hsglrt.detector import DetectorConfig, calibrate_threshold, glrt_statistic
from hsglrt.errors import ConfigError
from hsglrt.estimators import EstimatorConfig
from hsglrt.model import EndmemberLibrary, SceneConfig, generate_scene, trial_seed, validate_abundances
from hsglrt.stats import build_context

STREAM_H1 = 1
STREAM_H0 = 2
ESTIMATOR_NAMES = ("heuristic", "constrained")


@dataclass(frozen=True)
class TrialBatch:
    """Per-trial outputs of one estimator on one abundance row."""

    estimator: str
    alpha_true: np.ndarray
    alpha_hat: np.ndarray  # (trials, r)
    statistic: np.ndarray  # (trials,)
    delta_l1: np.ndarray  # (trials, n_iter + 1), first column NaN

    @property
    def n_trials(self) -> int:
        return self.statistic.size

    @property
    def mean_alpha(self) -> np.ndarray:
        return self.alpha_hat.mean(axis=0)

    @property
    def mean_abs_error(self) -> np.ndarray:
        """Per-component mean of ``|alpha_hat - alpha|`` over trials."""
        return np.mean(np.abs(self.alpha_hat - self.alpha_true), axis=0)

    @property
    def rmse(self) -> float:
        """``sqrt(mean ||alpha_hat - alpha||^2)`` over trials."""
        err = self.alpha_hat - self.alpha_true
        return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))

    @property
    def mean_delta_l1(self) -> np.ndarray:
        out = np.full(self.delta_l1.shape[1], np.nan)
        out[1:] = self.delta_l1[:, 1:].mean(axis=0)
        return out

    def detection_probability(self, threshold: float) -> float:
        return float(np.mean(self.statistic > threshold))


def _check_estimators(estimators) -> tuple[str, ...]:
    est = tuple(estimators)
    bad = [e for e in est if e not in ESTIMATOR_NAMES]
    if bad or not est:
        raise ConfigError(f"unknown estimators {bad or est}")
    return est


def run_trials(
    scene: SceneConfig,
    lib: EndmemberLibrary,
    alpha,
    n_trials: int,
    estimators=ESTIMATOR_NAMES,
    estimator_cfg: EstimatorConfig | None = None,
    stream: int = STREAM_H1,
    row: int = 0,
    threads: int = 1,
) -> dict[str, TrialBatch]:
    """Run ``n_trials`` independent scenes; every estimator sees the same data."""
    alpha = validate_abundances(alpha, lib.r)
    estimators = _check_estimators(estimators)
    if n_trials < 1:
        raise ConfigError("n_trials must be positive")
    ecfg = estimator_cfg or EstimatorConfig()
    dcfgs = {e: DetectorConfig(estimator=e, estimator_cfg=ecfg) for e in estimators}
    width = int(ecfg.n_iter) + 1
    out = {
        e: (np.empty((n_trials, lib.r)), np.empty(n_trials), np.empty((n_trials, width)))
        for e in estimators
    }

    def one(i):
        put, secondary = generate_scene(scene.with_seed(trial_seed(scene.seed, stream, row, i)), lib, alpha)
        ctx = build_context(secondary)
        for e in estimators:
            res = glrt_statistic(ctx, put, lib, dcfgs[e])
            a, s, d = out[e]
            a[i] = validate_abundances(res.alpha_hat, lib.r)
            s[i] = res.statistic
            d[i] = res.trace.delta_l1

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(one, range(n_trials)))
    else:
        for i in range(n_trials):
            one(i)
    return {e: TrialBatch(e, alpha, *out[e]) for e in estimators}


def h0_statistics(
    scene: SceneConfig,
    lib: EndmemberLibrary,
    n_trials: int,
    estimators=ESTIMATOR_NAMES,
    estimator_cfg: EstimatorConfig | None = None,
    threads: int = 1,
    row: int = 0,
) -> dict[str, np.ndarray]:
    """Target-free statistics from the calibration stream."""
    batches = run_trials(
        scene, lib, np.zeros(lib.r), n_trials, estimators, estimator_cfg,
        STREAM_H0, row, threads,
    )
    return {e: b.statistic for e, b in batches.items()}


@dataclass(frozen=True)
class SimulationReport:
    rows: tuple[tuple[float, ...], ...]
    batches: tuple[dict[str, TrialBatch], ...]
    thresholds: dict[str, float]
    pfa: float

    def summary_records(self, names) -> list[dict]:
        out = []
        for k, (row, per_est) in enumerate(zip(self.rows, self.batches)):
            for e, b in per_est.items():
                rec = {"row": k, "estimator": e, "alpha_sum": float(np.sum(row))}
                for n, a in zip(names, row):
                    rec[f"alpha_{n}"] = float(a)
                for n, a in zip(names, b.mean_alpha):
                    rec[f"mean_alpha_hat_{n}"] = float(a)
                rec["rmse"] = b.rmse
                rec["pd"] = b.detection_probability(self.thresholds[e])
                rec["threshold"] = self.thresholds[e]
                rec["trials"] = b.n_trials
                out.append(rec)
        return out

    def trace_records(self) -> list[dict]:
        out = []
        for k, per_est in enumerate(self.batches):
            for e, b in per_est.items():
                for h, v in enumerate(b.mean_delta_l1):
                    if h > 0:
                        out.append({"row": k, "estimator": e, "iteration": h, "mean_delta_l1": float(v)})
        return out


def simulate_rows(
    scene: SceneConfig,
    lib: EndmemberLibrary,
    rows,
    n_trials: int,
    n_h0: int,
    pfa: float,
    estimators=ESTIMATOR_NAMES,
    estimator_cfg: EstimatorConfig | None = None,
    threads: int = 1,
) -> SimulationReport:
    """Calibrate on ``n_h0`` target-free trials, then run every abundance row."""
    rows = tuple(tuple(float(v) for v in validate_abundances(r, lib.r)) for r in rows)
    h0 = h0_statistics(scene, lib, n_h0, estimators, estimator_cfg, threads)
    thresholds = {e: calibrate_threshold(s, pfa) for e, s in h0.items()}
    batches = tuple(
        run_trials(scene, lib, r, n_trials, estimators, estimator_cfg, STREAM_H1, k, threads)
        for k, r in enumerate(rows)
    )
    return SimulationReport(rows, batches, thresholds, float(pfa))
