"""Entry points: one fit per request, dispatched on the correction."""

from __future__ import annotations

from ..core import Dataset, as_me_covariance
from ..errors import SpecificationError
from .comparators import rc_impute, simex_fit
from .fitting import problem_for
from .request import EstimateResult, EstimatorRequest


def fit(req: EstimatorRequest, data: Dataset) -> EstimateResult:
    """Run ``req`` on ``data``.

    ``oracle`` swaps in the hidden true exposures, ``naive`` treats A* as
    exact, ``cs`` uses the Monte-Carlo corrected score, ``rc`` substitutes
    the calibrated exposures and ``simex`` extrapolates refits.  ``rc`` and
    ``simex`` return point estimates only.
    """
    corr = req.correction
    if corr in ("cs", "rc", "simex") and req.sigma_me is None:
        raise SpecificationError(f"correction {corr!r} needs a measurement-error covariance")
    if corr == "simex":
        return simex_fit(req, data)
    if corr == "oracle":
        prob = problem_for(req, data.oracle())
    elif corr == "naive":
        prob = problem_for(req, data)
    elif corr == "rc":
        prob = problem_for(req, data.with_exposures(rc_impute(data, req.sigma_me)))
        return prob.summarize(prob.solve(variance=False), point_only=True)
    else:
        prob = problem_for(req, data, as_me_covariance(req.sigma_me, data.m), corrected=True)
    return prob.summarize(prob.solve())


def _checked(method: str, req: EstimatorRequest) -> EstimatorRequest:
    if req.method != method:
        raise SpecificationError(f"expected a {method} request, got method={req.method!r}")
    return req


def fit_gformula(req: EstimatorRequest, data: Dataset) -> EstimateResult:
    return fit(_checked("gformula", req), data)


def fit_ipw(req: EstimatorRequest, data: Dataset) -> EstimateResult:
    return fit(_checked("ipw", req), data)


def fit_dr(req: EstimatorRequest, data: Dataset) -> EstimateResult:
    return fit(_checked("dr", req), data)
