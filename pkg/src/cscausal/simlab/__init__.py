"""Simulation designs and the replicate runner."""

from .generators import (
    GENERATORS,
    Simulated,
    exposure_variance,
    generate,
    multiplicative_sigma2,
    reliability_to_sigma,
)
from .runner import (
    MethodSpec,
    MetricsRow,
    MetricsTable,
    StudyDesign,
    Target,
    default_study,
    replicate_seeds,
    run_study,
    sim1_truth,
)

__all__ = [
    "GENERATORS", "Simulated", "exposure_variance", "generate", "multiplicative_sigma2", "reliability_to_sigma",
    "MethodSpec", "MetricsRow", "MetricsTable", "StudyDesign", "Target", "default_study", "replicate_seeds",
    "run_study", "sim1_truth",
]
