"""Replacement-model pixels, endmember libraries and seeded scene synthesis.

Spectra are plain 1-D float arrays of length ``n_bands``; an endmember
library stores its signatures column-wise (``n_bands x r``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hsglrt.errors import ConfigError, DataError, DomainError

# Margin enforcing the strict inequality sum(alpha) < 1.
EPS_SUM = 1e-6
# Rounding slack when re-checking sums produced by floating-point updates.
_SUM_SLACK = 1e-12

# Abundance rows (alpha_2c, alpha_2b, alpha_3) of the simulated study.
STANDARD_ROWS = (
    (0.00, 0.00, 0.0),
    (0.31, 0.01, 0.0),
    (0.32, 0.02, 0.0),
    (0.33, 0.03, 0.0),
    (0.34, 0.04, 0.0),
    (0.35, 0.05, 0.0),
    (0.40, 0.10, 0.0),
    (0.45, 0.15, 0.0),
    (0.50, 0.20, 0.0),
    (0.55, 0.25, 0.0),
    (0.60, 0.30, 0.0),
)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def validate_abundances(alpha, r: int | None = None) -> np.ndarray:
    """Check the replacement-model constraints and return a float copy.

    Raises
    ------
    DomainError
        If an entry is negative or non-finite, or the entries do not sum
        to at most ``1 - EPS_SUM``.
    DataError
        On a length mismatch with ``r``.
    """
    a = np.array(alpha, dtype=float).reshape(-1)
    if r is not None and a.size != r:
        raise DataError(f"expected {r} abundances, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise DomainError("abundances must be finite")
    if np.any(a < 0.0):
        raise DomainError(f"abundances must be nonnegative, got {a}")
    total = float(a.sum())
    if total > 1.0 - EPS_SUM + _SUM_SLACK:
        raise DomainError(
            f"abundance sum {total:.12g} violates sum < 1 (margin {EPS_SUM:g})"
        )
    return a


def background_abundance(alpha) -> float:
    """Fraction of the pixel left to the background, ``1 - sum(alpha)``."""
    return 1.0 - float(np.sum(alpha))


@dataclass(frozen=True)
class EndmemberLibrary:
    """Target signatures stored column-wise with one name per column."""

    signatures: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        sig = np.array(self.signatures, dtype=float)
        if sig.ndim == 1:
            sig = sig[:, None]
        if sig.ndim != 2 or sig.shape[1] < 1:
            raise DataError("signatures must be an (n_bands, r) matrix with r >= 1")
        names = tuple(str(n) for n in self.names)
        if len(names) != sig.shape[1]:
            raise DataError(
                f"{len(names)} names given for {sig.shape[1]} signatures"
            )
        if len(set(names)) != len(names):
            raise DataError(f"duplicate endmember names: {names}")
        if not np.all(np.isfinite(sig)):
            raise DataError("signatures must be finite")
        object.__setattr__(self, "signatures", _readonly(sig))
        object.__setattr__(self, "names", names)

    @property
    def n_bands(self) -> int:
        return self.signatures.shape[0]

    @property
    def r(self) -> int:
        return self.signatures.shape[1]

    def subset(self, names) -> "EndmemberLibrary":
        idx = [self.names.index(n) for n in names]
        return EndmemberLibrary(self.signatures[:, idx], tuple(names))

    def scaled(self, factor: float) -> "EndmemberLibrary":
        return EndmemberLibrary(self.signatures * factor, self.names)


@dataclass(frozen=True)
class SceneConfig:
    """Gaussian background scene: ``b, b_k ~ N(background_mean, cov)``.

    ``cov`` defaults to ``noise_variance * I``; a full covariance may be
    supplied instead.
    """

    n_bands: int
    k_secondary: int
    noise_variance: float
    background_mean: np.ndarray | None = None
    seed: int = 0
    covariance: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_bands < 1:
            raise ConfigError("n_bands must be positive")
        if self.k_secondary <= self.n_bands:
            raise ConfigError(
                f"k_secondary ({self.k_secondary}) must exceed n_bands ({self.n_bands})"
            )
        if not self.noise_variance >= 0.0:
            raise ConfigError("noise_variance must be >= 0")
        mean = (
            np.zeros(self.n_bands)
            if self.background_mean is None
            else np.array(self.background_mean, dtype=float).reshape(-1)
        )
        if mean.size != self.n_bands or not np.all(np.isfinite(mean)):
            raise ConfigError("background_mean must be a finite vector of length n_bands")
        object.__setattr__(self, "background_mean", _readonly(mean))
        if self.covariance is not None:
            cov = np.array(self.covariance, dtype=float)
            if cov.shape != (self.n_bands, self.n_bands):
                raise ConfigError("covariance must be n_bands x n_bands")
            object.__setattr__(self, "covariance", _readonly(cov))

    def with_seed(self, seed: int) -> "SceneConfig":
        return SceneConfig(
            self.n_bands,
            self.k_secondary,
            self.noise_variance,
            self.background_mean,
            int(seed),
            self.covariance,
        )


def synthesize_pixel(lib: EndmemberLibrary, alpha, background) -> np.ndarray:
    """Mix targets into a background spectrum: ``T @ alpha + (1 - sum(alpha)) * b``."""
    a = validate_abundances(alpha, lib.r)
    b = np.asarray(background, dtype=float).reshape(-1)
    if b.size != lib.n_bands:
        raise DataError(
            f"background has {b.size} bands, library has {lib.n_bands}"
        )
    return lib.signatures @ a + (1.0 - a.sum()) * b


def draw_background(cfg: SceneConfig, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` independent background spectra as columns of an (N, size) array."""
    noise = rng.standard_normal((cfg.n_bands, size))
    if cfg.covariance is not None:
        noise = np.linalg.cholesky(cfg.covariance) @ noise
    else:
        noise *= np.sqrt(cfg.noise_variance)
    return cfg.background_mean[:, None] + noise


def generate_scene(cfg: SceneConfig, lib: EndmemberLibrary, alpha):
    """Draw one pixel under test and its ``K`` secondary pixels.

    Returns ``(put, secondary)`` with ``secondary`` of shape (N, K). The
    output depends only on the arguments; the generator is seeded from
    ``cfg.seed``.
    """
    if lib.n_bands != cfg.n_bands:
        raise DataError(f"library has {lib.n_bands} bands, scene has {cfg.n_bands}")
    a = validate_abundances(alpha, lib.r)
    rng = np.random.default_rng(cfg.seed)
    secondary = draw_background(cfg, cfg.k_secondary, rng)
    b = draw_background(cfg, 1, rng)[:, 0]
    return synthesize_pixel(lib, a, b), secondary


def trial_seed(base_seed: int, *keys: int) -> int:
    """Independent 64-bit seed for a (base, key...) tuple, e.g. one MC trial."""
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Synthetic signatures
# ---------------------------------------------------------------------------

def default_band_centers(n_bands: int = 126) -> np.ndarray:
    """Evenly spaced band centers (um) spanning 0.45-2.48 um."""
    return np.linspace(0.45, 2.48, n_bands)


def _bump(w, center, width):
    return np.exp(-0.5 * ((w - center) / width) ** 2)


def _edge(w, center, width):
    return 1.0 / (1.0 + np.exp(-(w - center) / width))


def synthetic_vehicle_library(band_centers=None, scale: float = 100.0) -> EndmemberLibrary:
    """Smooth paint-like stand-ins for the cabin, bed and car signatures.

    Values are reflectance times ``scale`` (percent by default). ``t_2c``
    is a dark blue paint, ``t_2b`` a bright panel peaking in the near
    infrared and ``t_3`` a red paint with a short-wave infrared feature.
    The three shapes are deliberately distinct so that cyclic coordinate
    updates are well conditioned. These are not laboratory spectra.
    """
    w = default_band_centers() if band_centers is None else np.asarray(band_centers, float)
    water = 1.0 - 0.25 * _bump(w, 1.40, 0.04) - 0.35 * _bump(w, 1.90, 0.05)
    t_2c = 0.03 + 0.30 * _bump(w, 0.48, 0.06) + 0.10 * _bump(w, 2.20, 0.15)
    t_2b = 0.05 + 0.45 * _bump(w, 1.25, 0.25)
    t_3 = (
        0.04
        + 0.50 * _edge(w, 0.62, 0.02) * (1.0 - _edge(w, 0.95, 0.05))
        + 0.25 * _bump(w, 1.70, 0.10)
    )
    sig = np.column_stack([t_2c, t_2b, t_3]) * water[:, None] * scale
    return EndmemberLibrary(sig, ("t_2c", "t_2b", "t_3"))
