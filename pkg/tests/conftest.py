import numpy as np
import pytest

from hsglrt.io import BandMask, apply_band_mask
from hsglrt.model import EndmemberLibrary, synthesize_pixel, synthetic_vehicle_library
from hsglrt.stats import build_context, whiten


def random_library(rng, n_bands, r, low=1.0, high=10.0):
    sig = rng.uniform(low, high, (n_bands, r))
    return EndmemberLibrary(sig, tuple(f"t{i}" for i in range(r)))


def random_alpha(rng, r, max_sum=0.9):
    return rng.uniform(0.0, max_sum) * rng.dirichlet(np.ones(r))


def random_instance(rng, n_bands, k, r, max_sum=0.9):
    """Gaussian secondary data, a pixel with random abundances, and its library."""
    lib = random_library(rng, n_bands, r)
    alpha = random_alpha(rng, r, max_sum)
    secondary = rng.standard_normal((n_bands, k))
    y = synthesize_pixel(lib, alpha, rng.standard_normal(n_bands))
    return secondary, y, lib, alpha


def random_problem(rng, n_bands=8, k=60, r=2, max_sum=0.9):
    secondary, y, lib, alpha = random_instance(rng, n_bands, k, r, max_sum)
    ctx = build_context(secondary)
    return whiten(ctx, y, lib), ctx, lib, y, alpha


def perturb(rng, mu, M, scale=0.05):
    """Random nearby mean and positive-definite covariance."""
    n = mu.size
    E = rng.standard_normal((n, n)) * scale
    F = np.eye(n) + (E + E.T) / 2
    M2 = F @ M @ F.T
    return mu + scale * rng.standard_normal(n) * np.sqrt(np.diag(M)), M2


# (criterion, passed, detail) lines from the acceptance suite
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def vehicle_library():
    """Built-in synthetic library after the default band mask (116 bands)."""
    return apply_band_mask(synthetic_vehicle_library(), BandMask())
