"""Network scale-up estimators for aggregated relational data (ARD)."""

from .calibration import (
    CalibrationCurve,
    CalibrationError,
    VisibilityFactor,
    apply_calibration_curve,
    eiv_recall_adjust,
    fit_calibration_curve,
    loo_backestimates,
    scale_by_visibility,
    trim_stepwise,
)
from .classic import (
    EstimationError,
    JohnsenOrderingError,
    gnsum,
    johnsen_bounds,
    mle,
    mos,
    pimle,
    pimle_degrees,
    weighted_mle,
    weighted_mos,
)
from .survey import ArdSurvey, EnrichedArd, SizeEstimate, SurveyError, load_survey, validate

__all__ = [
    "ArdSurvey",
    "CalibrationCurve",
    "CalibrationError",
    "EnrichedArd",
    "EstimationError",
    "JohnsenOrderingError",
    "SizeEstimate",
    "SurveyError",
    "VisibilityFactor",
    "apply_calibration_curve",
    "eiv_recall_adjust",
    "fit_calibration_curve",
    "gnsum",
    "johnsen_bounds",
    "load_survey",
    "loo_backestimates",
    "mle",
    "mos",
    "pimle",
    "pimle_degrees",
    "scale_by_visibility",
    "trim_stepwise",
    "validate",
    "weighted_mle",
    "weighted_mos",
]
