import warnings

import numpy as np
import pytest
from scipy.stats import binom

from hsglrt.detector import (
    DetectionGrid,
    DetectorConfig,
    annulus_offsets,
    calibrate_threshold,
    false_alarm_rate,
    glrt_statistic,
    secondary_for_pixel,
    sliding_detect,
)
from hsglrt.errors import ConfigError, DataError, SingularStatisticsError
from hsglrt.estimators import EstimatorConfig
from hsglrt.io import HyperCube
from hsglrt.model import SceneConfig, synthesize_pixel
from hsglrt.montecarlo import h0_statistics, run_trials
from hsglrt.stats import (
    build_context,
    g_objective,
    log_likelihood_h0,
    log_likelihood_h1,
    whiten,
)

from conftest import random_instance, random_library


def gaussian_cube(seed, rows, cols, bands):
    return np.random.default_rng(seed).standard_normal((rows, cols, bands))


SMALL = DetectorConfig(bg_window=7, guard_window=3)  # K = 40


class TestConfig:
    def test_secondary_count(self):
        assert DetectorConfig().n_secondary == 55 ** 2 - 3 ** 2 == 3016
        assert DetectorConfig(subsample=625).n_secondary == 625

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"bg_window": 4},
            {"guard_window": 0},
            {"bg_window": 5, "guard_window": 5},
            {"estimator": "newton"},
            {"subsample": 0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DetectorConfig(**kwargs)

    def test_with_threshold(self):
        cfg = DetectorConfig(estimator="heuristic").with_threshold(3)
        assert cfg.threshold == 3.0 and cfg.estimator == "heuristic"


class TestStatistic:
    def test_zero_abundance_closed_form(self, rng):
        z, y, lib, _ = random_instance(rng, 5, 30, 2)
        ctx = build_context(z)
        at_zero = log_likelihood_h1(ctx, y, lib, [0.0, 0.0]) - log_likelihood_h0(y, z)
        assert abs(at_zero) < 1e-9 * abs(log_likelihood_h0(y, z))

    def test_equals_objective_drop(self, rng):
        z, y, lib, _ = random_instance(rng, 6, 40, 3)
        ctx = build_context(z)
        wp = whiten(ctx, y, lib)
        res = glrt_statistic(ctx, y, lib)
        drop = g_objective(wp, ctx, np.zeros(3)) - g_objective(wp, ctx, res.alpha_hat)
        assert res.statistic == pytest.approx(drop, rel=1e-8, abs=1e-8)

    def test_finite(self, vehicle_library):
        scene = SceneConfig(116, 625, 0.5, seed=4)
        for alpha in [(0.0, 0.0, 0.0), (0.3, 0.1, 0.0)]:
            for b in run_trials(scene, vehicle_library, alpha, 30).values():
                assert np.all(np.isfinite(b.statistic))

    def test_estimators_share_h0_term(self, rng):
        z, y, lib, _ = random_instance(rng, 6, 40, 2)
        ctx = build_context(z)
        wp = whiten(ctx, y, lib)
        vals = []
        for e in ("heuristic", "constrained"):
            res = glrt_statistic(ctx, y, lib, DetectorConfig(estimator=e))
            vals.append(res.statistic + g_objective(wp, ctx, res.alpha_hat))
        assert vals[0] == pytest.approx(vals[1], rel=1e-10)

    def test_decision(self, rng):
        z, y, lib, _ = random_instance(rng, 6, 40, 2)
        ctx = build_context(z)
        res = glrt_statistic(ctx, y, lib)
        assert res.decision is None
        hi = glrt_statistic(ctx, y, lib, DetectorConfig(threshold=res.statistic + 1))
        lo = glrt_statistic(ctx, y, lib, DetectorConfig(threshold=res.statistic - 1))
        assert hi.decision is False and lo.decision is True
        same = glrt_statistic(ctx, y, lib, DetectorConfig(threshold=res.statistic))
        assert same.decision is False

    def test_permutation_invariance(self, rng):
        z, y, lib, _ = random_instance(rng, 6, 40, 2)
        a = glrt_statistic(build_context(z), y, lib)
        b = glrt_statistic(build_context(z[:, rng.permutation(40)]), y, lib)
        assert a.statistic == pytest.approx(b.statistic, rel=1e-9, abs=1e-9)

    def test_singular_statistics_propagate(self, rng):
        with pytest.raises(SingularStatisticsError):
            build_context(rng.standard_normal((6, 6)))

    @pytest.mark.slow
    def test_strong_target_detected(self, vehicle_library):
        scene = SceneConfig(116, 625, 0.5, seed=77)
        h0 = h0_statistics(scene, vehicle_library, 2000, ("constrained",))["constrained"]
        thr = np.quantile(h0, 0.999)
        h1 = run_trials(scene, vehicle_library, (0.6, 0.3, 0.0), 1000, ("constrained",))["constrained"]
        assert h1.detection_probability(thr) >= 0.9


class TestCalibration:
    def test_order_statistic(self):
        s = np.arange(1, 101)
        assert calibrate_threshold(s, 0.05) == 96
        assert np.sum(s > 96) == 4

    def test_shuffled_input(self, rng):
        s = rng.permutation(np.arange(1, 101))
        assert calibrate_threshold(s, 0.05) == 96

    def test_median(self):
        assert calibrate_threshold(np.arange(1, 102), 0.5) == 51

    def test_minimum_at_high_pfa(self):
        s = np.array([5.0, 3.0, 9.0, 4.0])
        assert calibrate_threshold(s, 1 - 1e-9) == 3.0

    def test_region_of_441(self, rng):
        s = rng.standard_normal(441)
        t = calibrate_threshold(s, 1e-2)
        assert t == np.sort(s)[436]
        assert np.sum(s > t) == 4

    def test_errors(self):
        with pytest.raises(DataError):
            calibrate_threshold([], 0.1)
        with pytest.raises(ConfigError):
            calibrate_threshold([1.0], 0.0)
        with pytest.raises(ConfigError):
            calibrate_threshold([1.0], 1.0)

    def test_small_sample_warns(self):
        with pytest.warns(UserWarning):
            calibrate_threshold(np.arange(10.0), 1e-2)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            calibrate_threshold(np.arange(100.0), 1e-2)


class TestAnnulus:
    def test_count_and_guard(self):
        off = annulus_offsets(55, 3)
        assert len(off) == 3016
        assert not np.any(np.all(np.abs(off) <= 1, axis=1))
        assert len({tuple(o) for o in off}) == len(off)

    def test_row_major(self):
        off = annulus_offsets(5, 3)
        assert len(off) == 16
        assert [tuple(o) for o in off[:6]] == [(-2, -2), (-2, -1), (-2, 0), (-2, 1), (-2, 2), (-1, -2)]
        keys = [tuple(o) for o in off]
        assert keys == sorted(keys)

    def test_secondary_extraction(self):
        data = np.arange(7 * 7 * 2, dtype=float).reshape(7, 7, 2)
        Z = secondary_for_pixel(data, 3, 3, annulus_offsets(5, 3), DetectorConfig(bg_window=5, guard_window=3))
        assert Z.shape == (2, 16)
        np.testing.assert_array_equal(Z[:, 0], data[1, 1])
        np.testing.assert_array_equal(Z[:, -1], data[5, 5])

    def test_subsample_deterministic(self):
        data = gaussian_cube(0, 9, 9, 2)
        cfg = DetectorConfig(bg_window=7, guard_window=3, subsample=20, seed=5)
        off = annulus_offsets(7, 3)
        a = secondary_for_pixel(data, 4, 4, off, cfg)
        b = secondary_for_pixel(data, 4, 4, off, cfg)
        assert a.shape == (2, 20)
        np.testing.assert_array_equal(a, b)


class TestSlidingDetect:
    def test_matches_per_pixel(self, rng):
        cube = gaussian_cube(1, 16, 15, 6)
        lib = random_library(rng, 6, 2)
        grid = sliding_detect(cube, lib, SMALL)
        off = annulus_offsets(7, 3)
        rows, cols = np.nonzero(grid.valid)
        pick = rng.choice(len(rows), 10, replace=False)
        for r, c in zip(rows[pick], cols[pick]):
            ctx = build_context(secondary_for_pixel(cube, r, c, off, SMALL))
            res = glrt_statistic(ctx, cube[r, c], lib, SMALL)
            assert grid.statistic[r, c] == res.statistic
            np.testing.assert_array_equal(grid.alpha_hat[r, c], res.alpha_hat)

    def test_border_invalid(self, rng):
        cube = gaussian_cube(2, 12, 13, 6)
        grid = sliding_detect(cube, random_library(rng, 6, 1), SMALL)
        assert grid.valid.sum() == (12 - 6) * (13 - 6)
        assert not grid.valid[:3].any() and not grid.valid[:, -3:].any()
        assert np.all(np.isnan(grid.statistic[~grid.valid]))
        assert np.all(np.isfinite(grid.statistic[grid.valid]))

    def test_region(self, rng):
        cube = gaussian_cube(3, 14, 14, 6)
        lib = random_library(rng, 6, 1)
        full = sliding_detect(cube, lib, SMALL)
        part = sliding_detect(cube, lib, SMALL, region=(4, 8, 5, 9))
        assert part.processed.sum() == 16 and part.valid.sum() == 16
        np.testing.assert_array_equal(part.statistic[4:8, 5:9], full.statistic[4:8, 5:9])
        assert part.statistics((0, 6, 0, 14)).size == 8

    def test_thread_independent(self, rng):
        cube = gaussian_cube(4, 14, 14, 6)
        lib = random_library(rng, 6, 2)
        a = sliding_detect(cube, lib, SMALL, threads=1)
        b = sliding_detect(cube, lib, SMALL, threads=4)
        np.testing.assert_array_equal(a.statistic, b.statistic)

    def test_errors(self, rng):
        lib = random_library(rng, 6, 1)
        with pytest.raises(DataError):
            sliding_detect(gaussian_cube(0, 5, 20, 6), lib, SMALL)
        with pytest.raises(DataError):
            sliding_detect(gaussian_cube(0, 10, 10, 5), lib, SMALL)
        with pytest.raises(ConfigError):
            sliding_detect(gaussian_cube(0, 10, 10, 6), lib, DetectorConfig(bg_window=5, guard_window=3, subsample=6))

    def test_accepts_hypercube(self, rng):
        cube = gaussian_cube(5, 9, 9, 6)
        lib = random_library(rng, 6, 1)
        a = sliding_detect(HyperCube(cube), lib, SMALL)
        b = sliding_detect(cube, lib, SMALL)
        np.testing.assert_array_equal(a.statistic, b.statistic)

    def test_false_alarm_on_background_cube(self, rng):
        lib = random_library(rng, 6, 2)
        cfg = DetectorConfig(bg_window=7, guard_window=3, estimator_cfg=EstimatorConfig(n_iter=5))
        calib = np.concatenate([
            sliding_detect(gaussian_cube(100 + k, 46, 46, 6), lib, cfg).statistics() for k in range(4)
        ])
        thr = calibrate_threshold(calib, 1e-2)
        test = sliding_detect(gaussian_cube(200, 46, 46, 6), lib, cfg).apply_threshold(thr)
        n = int(test.valid.sum())
        flagged = int(test.decision.sum())
        lo, hi = binom.interval(0.95, n, 1e-2)
        assert lo <= flagged <= hi

    def test_injected_pixel_detected(self, vehicle_library):
        rng = np.random.default_rng(8)
        cube = np.sqrt(0.5) * rng.standard_normal((45, 45, 116))
        cfg = DetectorConfig(bg_window=25, guard_window=3)
        # threshold from the target-free central 21x21 block
        thr = calibrate_threshold(sliding_detect(cube, vehicle_library, cfg).statistics(), 1e-2)
        lib2 = vehicle_library.subset(["t_2c", "t_2b"])
        filled = cube.copy()
        filled[22, 22] = synthesize_pixel(lib2, [0.5, 0.2], cube[22, 22])
        grid = sliding_detect(filled, vehicle_library, cfg.with_threshold(thr), region=(22, 23, 22, 23))
        assert grid.decision[22, 22]


class TestFalseAlarmRate:
    def make_grid(self, stats, valid=None):
        stats = np.asarray(stats, float)
        valid = np.ones(stats.shape, bool) if valid is None else valid
        return DetectionGrid(stats, np.zeros(stats.shape + (1,)), np.zeros(stats.shape, bool), valid, valid.copy(), ("t",))

    def test_global_max_reference(self):
        g = self.make_grid([[1.0, 2.0], [3.0, 9.0]])
        assert false_alarm_rate(g, reference=(1, 1)) == 0.0

    def test_ties_not_counted(self):
        g = self.make_grid(np.full((3, 3), 2.0))
        assert false_alarm_rate(g, reference=(1, 1)) == 0.0
        assert false_alarm_rate(g, threshold=2.0) == 0.0

    def test_counts(self):
        g = self.make_grid([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        # 5 non-reference pixels, 3 strictly above 3
        assert false_alarm_rate(g, reference=(0, 2)) == pytest.approx(3 / 5)
        truth = np.zeros((2, 3), bool)
        truth[1, 2] = True
        assert false_alarm_rate(g, reference=(0, 2), truth_mask=truth) == pytest.approx(2 / 4)
        assert false_alarm_rate(g, threshold=4.5) == pytest.approx(2 / 6)

    def test_invalid_reference(self):
        valid = np.array([[True, False]])
        g = self.make_grid([[1.0, np.nan]], valid)
        with pytest.raises(DataError):
            false_alarm_rate(g, reference=(0, 1))
        with pytest.raises(DataError):
            false_alarm_rate(g, reference=(5, 5))
        with pytest.raises(ConfigError):
            false_alarm_rate(g)
