"""GLRT detection of multiple sub-pixel targets under the generalized
replacement model."""

from hsglrt.errors import (
    ConfigError,
    DataError,
    DomainError,
    HsglrtError,
    SingularStatisticsError,
)
from hsglrt.model import (
    EPS_SUM,
    EndmemberLibrary,
    SceneConfig,
    generate_scene,
    synthesize_pixel,
    validate_abundances,
)
from hsglrt.stats import (
    BackgroundContext,
    WhitenedProblem,
    build_context,
    g_objective,
    log_likelihood_h0,
    log_likelihood_h1,
    whiten,
)
from hsglrt.estimators import (
    EstimateTrace,
    EstimatorConfig,
    estimate_constrained,
    estimate_heuristic,
    estimate_oracle,
)
from hsglrt.detector import (
    DetectionResult,
    DetectorConfig,
    calibrate_threshold,
    false_alarm_rate,
    glrt_statistic,
    sliding_detect,
)

__version__ = "0.1.0"
