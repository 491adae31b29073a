"""Corrected-score g-formula, IPW and doubly robust estimators plus comparators."""

from .api import fit, fit_dr, fit_gformula, fit_ipw
from .auxiliary import (
    SensitivityCell,
    estimate_me_covariance,
    me_covariance_from_replicates,
    sensitivity_grid,
    two_phase_sample,
    two_phase_weights,
)
from .comparators import extrapolate_quadratic, rc_impute, simex_fit
from .fitting import StackedProblem, problem_for
from .request import (
    CORRECTIONS,
    METHODS,
    DoseResponse,
    Estimate,
    EstimateResult,
    EstimatorRequest,
    contrast_label,
    dose_grid,
    point_label,
)
from .scores import MeanScore

__all__ = [
    "CORRECTIONS",
    "METHODS",
    "DoseResponse",
    "Estimate",
    "EstimateResult",
    "EstimatorRequest",
    "MeanScore",
    "SensitivityCell",
    "StackedProblem",
    "contrast_label",
    "dose_grid",
    "estimate_me_covariance",
    "extrapolate_quadratic",
    "fit",
    "fit_dr",
    "fit_gformula",
    "fit_ipw",
    "me_covariance_from_replicates",
    "point_label",
    "problem_for",
    "rc_impute",
    "sensitivity_grid",
    "simex_fit",
    "two_phase_sample",
    "two_phase_weights",
]
