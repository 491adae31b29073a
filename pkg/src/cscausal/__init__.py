"""Corrected-score causal estimators for exposures with additive measurement error."""

from .core import Dataset, FitResult, MeCovariance, ParameterVector, as_me_covariance, factor_me_covariance
from .cscore import closed_form_cs_ipw, complex_link, draw_perturbations, mccs_transform
from .estimators import EstimatorRequest, fit, fit_dr, fit_gformula, fit_ipw
from .mestim import SolveOptions, solve
from .models import DesignSpec, MeanModel, PropensitySpec

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DesignSpec",
    "EstimatorRequest",
    "FitResult",
    "MeCovariance",
    "MeanModel",
    "ParameterVector",
    "PropensitySpec",
    "SolveOptions",
    "as_me_covariance",
    "closed_form_cs_ipw",
    "complex_link",
    "draw_perturbations",
    "factor_me_covariance",
    "fit",
    "fit_dr",
    "fit_gformula",
    "fit_ipw",
    "mccs_transform",
    "solve",
]
