import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsglrt.errors import ConfigError, DataError, DomainError
from hsglrt.model import (
    EPS_SUM,
    STANDARD_ROWS,
    EndmemberLibrary,
    SceneConfig,
    background_abundance,
    default_band_centers,
    generate_scene,
    synthesize_pixel,
    synthetic_vehicle_library,
    trial_seed,
    validate_abundances,
)

from conftest import random_library


def abundance_vectors(r):
    """Nonnegative vectors of length r with sum <= 1 - EPS_SUM."""
    return st.lists(st.floats(0.0, 1.0), min_size=r, max_size=r).map(
        lambda v: np.asarray(v) * (1.0 - EPS_SUM) / max(1.0, sum(v) + 1e-9)
    )


class TestAbundances:
    def test_valid_vector_passes(self):
        np.testing.assert_array_equal(validate_abundances([0.5, 0.2]), [0.5, 0.2])

    def test_negative_entry_rejected(self):
        with pytest.raises(DomainError):
            validate_abundances([0.5, -1e-9])

    def test_sum_margin(self):
        validate_abundances([1.0 - EPS_SUM])
        with pytest.raises(DomainError):
            validate_abundances([1.0 - EPS_SUM / 2])
        with pytest.raises(DomainError):
            validate_abundances([0.6, 0.4])

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            validate_abundances([np.nan])

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            validate_abundances([0.1, 0.1], r=3)

    @given(abundance_vectors(3))
    def test_background_fraction_in_unit_interval(self, alpha):
        a = validate_abundances(alpha)
        assert 0.0 < background_abundance(a) <= 1.0


class TestLibrary:
    def test_shape_and_names(self):
        lib = EndmemberLibrary(np.ones((5, 2)), ("a", "b"))
        assert (lib.n_bands, lib.r) == (5, 2)
        assert lib.subset(["b"]).names == ("b",)

    def test_single_column_vector(self):
        assert EndmemberLibrary(np.ones(4), ("a",)).r == 1

    def test_duplicate_names(self):
        with pytest.raises(DataError):
            EndmemberLibrary(np.ones((3, 2)), ("a", "a"))

    def test_nonfinite(self):
        with pytest.raises(DataError):
            EndmemberLibrary(np.array([[1.0], [np.inf]]), ("a",))

    def test_name_count(self):
        with pytest.raises(DataError):
            EndmemberLibrary(np.ones((3, 2)), ("a",))

    def test_read_only(self):
        lib = EndmemberLibrary(np.ones((3, 1)), ("a",))
        with pytest.raises(ValueError):
            lib.signatures[0, 0] = 2.0

    def test_synthetic_library(self):
        lib = synthetic_vehicle_library()
        assert lib.names == ("t_2c", "t_2b", "t_3")
        assert lib.signatures.shape == (126, 3)
        assert np.all(lib.signatures > 0)
        # percent reflectance
        assert lib.signatures.max() < 100.0
        np.testing.assert_allclose(
            synthetic_vehicle_library(scale=1.0).signatures * 100.0, lib.signatures
        )

    def test_band_centers(self):
        w = default_band_centers()
        assert w.size == 126 and w[0] == pytest.approx(0.45) and w[-1] == pytest.approx(2.48)


class TestSynthesizePixel:
    def test_zero_abundance_gives_background(self, rng):
        lib = random_library(rng, 6, 2)
        b = rng.standard_normal(6)
        np.testing.assert_array_equal(synthesize_pixel(lib, [0.0, 0.0], b), b)

    def test_target_equal_to_background(self, rng):
        b = rng.standard_normal(6)
        lib = EndmemberLibrary(b[:, None], ("b",))
        np.testing.assert_allclose(synthesize_pixel(lib, [0.5], b), b, rtol=0, atol=1e-15)

    def test_filled_pixel(self, rng):
        lib = synthetic_vehicle_library().subset(["t_2c", "t_2b"])
        y_bg = rng.uniform(5, 40, lib.n_bands)
        expected = 0.5 * lib.signatures[:, 0] + 0.2 * lib.signatures[:, 1] + 0.3 * y_bg
        np.testing.assert_allclose(synthesize_pixel(lib, [0.5, 0.2], y_bg), expected, rtol=1e-14)

    def test_dimension_mismatch(self, rng):
        lib = random_library(rng, 6, 2)
        with pytest.raises(DataError):
            synthesize_pixel(lib, [0.1, 0.1], np.zeros(5))
        with pytest.raises(DataError):
            synthesize_pixel(lib, [0.1], np.zeros(6))

    def test_invalid_abundances(self, rng):
        lib = random_library(rng, 6, 2)
        with pytest.raises(DomainError):
            synthesize_pixel(lib, [0.7, 0.4], np.zeros(6))

    @settings(max_examples=50, deadline=None)
    @given(abundance_vectors(3), st.integers(0, 2**32 - 1))
    def test_affine_in_abundances(self, alpha, seed):
        rng = np.random.default_rng(seed)
        lib = random_library(rng, 7, 3)
        b = rng.standard_normal(7)
        lhs = synthesize_pixel(lib, alpha, b) - b
        rhs = (lib.signatures - b[:, None]) @ alpha
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


class TestScene:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SceneConfig(10, 10, 0.5)
        with pytest.raises(ConfigError):
            SceneConfig(10, 20, -1.0)
        with pytest.raises(ConfigError):
            SceneConfig(3, 20, 1.0, background_mean=[0.0, 1.0])

    def test_default_mean_is_zero(self):
        np.testing.assert_array_equal(SceneConfig(3, 5, 1.0).background_mean, np.zeros(3))

    def test_noise_free(self, rng):
        lib = random_library(rng, 4, 2)
        mu = np.arange(4.0)
        put, sec = generate_scene(SceneConfig(4, 9, 0.0, background_mean=mu), lib, [0.0, 0.0])
        np.testing.assert_array_equal(put, mu)
        np.testing.assert_array_equal(sec, np.repeat(mu[:, None], 9, axis=1))

    def test_deterministic(self, rng):
        lib = random_library(rng, 5, 2)
        cfg = SceneConfig(5, 12, 0.5, seed=123)
        a = generate_scene(cfg, lib, [0.3, 0.1])
        b = generate_scene(cfg, lib, [0.3, 0.1])
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        c = generate_scene(cfg.with_seed(124), lib, [0.3, 0.1])
        assert not np.array_equal(a[1], c[1])

    def test_secondary_mean(self, vehicle_library):
        cfg = SceneConfig(116, 625, 0.5, seed=7)
        _, sec = generate_scene(cfg, vehicle_library, (0.55, 0.25, 0.0))
        assert sec.shape == (116, 625)
        bound = 3.0 * np.sqrt(0.5) / np.sqrt(625)
        # 3 sigma per band; allow the expected ~0.3% of bands to exceed it
        assert np.mean(np.abs(sec.mean(axis=1)) > bound) < 0.03
        assert np.all(np.abs(sec.mean(axis=1)) < 4.5 * np.sqrt(0.5) / np.sqrt(625))

    def test_full_covariance(self, rng):
        lib = random_library(rng, 3, 1)
        cov = np.array([[1.0, 0.8, 0.0], [0.8, 1.0, 0.0], [0.0, 0.0, 0.1]])
        _, sec = generate_scene(SceneConfig(3, 20000, 1.0, seed=1, covariance=cov), lib, [0.0])
        np.testing.assert_allclose(np.cov(sec), cov, atol=0.05)

    def test_library_scene_mismatch(self, rng):
        with pytest.raises(DataError):
            generate_scene(SceneConfig(5, 10, 1.0), random_library(rng, 4, 1), [0.1])


class TestSeedsAndRows:
    def test_trial_seed_stable_and_distinct(self):
        assert trial_seed(1, 2, 3) == trial_seed(1, 2, 3)
        seeds = {trial_seed(0, 1, i) for i in range(1000)}
        assert len(seeds) == 1000
        assert trial_seed(0, 1, 2) != trial_seed(0, 2, 1)

    def test_standard_rows(self):
        assert len(STANDARD_ROWS) == 11
        assert STANDARD_ROWS[0] == (0.0, 0.0, 0.0)
        assert sum(STANDARD_ROWS[-1]) == pytest.approx(0.9)
        assert 1.0 - sum(STANDARD_ROWS[-1]) == pytest.approx(0.1)
        for row in STANDARD_ROWS:
            validate_abundances(row, 3)
