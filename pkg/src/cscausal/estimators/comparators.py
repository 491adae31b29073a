"""Regression-calibration and SIMEX comparators (point estimates only)."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..core import Dataset, FitResult, as_me_covariance
from ..errors import CollinearityError, CsCausalError, SimexError
from .fitting import StackedProblem, problem_for
from .request import EstimateResult, EstimatorRequest


def rc_impute(data: Dataset, sigma) -> np.ndarray:
    """Best-linear-predictor imputation of A given (A*, L) from sample moments.

    Moments use the ``n - 1`` denominator; Cov(A) is the sample covariance of
    A* minus Sigma_me.  With Sigma_me = 0 the measured exposures are
    returned unchanged.
    """
    sigma = as_me_covariance(sigma, data.m)
    if sigma.is_zero:
        return np.array(data.a_star)
    n, m, p = data.n, data.m, data.p
    if n <= p + m + 1:
        raise CollinearityError(f"regression calibration needs n > p + m + 1 (n={n}, p={p}, m={m})")
    z = np.hstack([data.a_star, data.l])
    centre = z.mean(axis=0)
    dev = z - centre
    s = dev.T @ dev / (n - 1)  # [[Cov(A) + S, Cov(A, L)], [Cov(L, A), Cov(L)]]
    cov_a = s[:m, :m] - sigma.sigma
    cross = np.vstack([cov_a, s[m:, :m]])  # [Cov(A); Cov(L, A)]
    if np.linalg.cond(s) > 1e12:
        raise CollinearityError("joint covariance of (A*, L) is singular")
    coef = np.linalg.solve(s, cross)
    return centre[:m] + dev @ coef


def extrapolate_quadratic(lambdas, path, at: float = -1.0) -> np.ndarray:
    """Least-squares quadratic in lambda through each column of ``path``, evaluated at ``at``."""
    coef = np.polyfit(np.asarray(lambdas, dtype=float), np.asarray(path, dtype=float), 2)
    return coef[0] * at**2 + coef[1] * at + coef[2]


def _point_fit(req: EstimatorRequest, data: Dataset) -> tuple[StackedProblem, FitResult]:
    prob = problem_for(req, data)
    return prob, prob.solve(variance=False)


def simex_fit(req: EstimatorRequest, data: Dataset) -> EstimateResult:
    """SIMEX with quadratic extrapolation to lambda = -1.

    theta(lambda) averages ``req.simex_draws`` uncorrected fits on
    ``A* + sqrt(lambda) e`` with ``e ~ N(0, Sigma_me)``; the pseudo-errors come
    from their own seed stream, keyed by ``(simex_seed, lambda index, b)``.
    For g-formula and DR only the outcome coefficients are extrapolated and
    the dose-response is recomputed from them.
    """
    sigma = as_me_covariance(req.sigma_me, data.m)
    naive_req = replace(req, correction="naive")
    base, fit0 = _point_fit(naive_req, data)
    if not fit0.converged:
        raise SimexError("uncorrected fit at lambda = 0 did not converge", 0.0, -1)
    lambdas = np.asarray(req.simex_lambdas, dtype=float)
    thetas = [fit0.theta_hat.values]
    factor = sigma.rank_factor
    for li, lam in enumerate(lambdas):
        acc = np.zeros(base.dim)
        for b in range(req.simex_draws):
            rng = np.random.default_rng(np.random.SeedSequence([req.simex_seed, li, b]))
            noise = rng.standard_normal((data.n, factor.shape[1])) @ factor.T
            try:
                _, fit = _point_fit(naive_req, data.with_exposures(data.a_star + np.sqrt(lam) * noise))
            except CsCausalError as exc:
                raise SimexError(f"SIMEX refit failed at lambda={lam:g}, b={b}: {exc}", lam, b) from exc
            if not fit.converged:
                raise SimexError(f"SIMEX refit did not converge at lambda={lam:g}, b={b}", lam, b)
            acc += fit.theta_hat.values
        thetas.append(acc / req.simex_draws)
    theta = extrapolate_quadratic(np.concatenate([[0.0], lambdas]), np.array(thetas))
    if base.eta is not None:
        theta[base.eta] = base.eta_closed_form(theta)
    q = base.dim
    nan = np.full((q, q), np.nan)
    fit = FitResult(fit0.theta_hat.with_values(theta), nan, nan.copy(), True, 0, float("nan"))
    return _summary(base, req, fit)


def _summary(base: StackedProblem, req: EstimatorRequest, fit: FitResult) -> EstimateResult:
    out = base.summarize(fit, point_only=True)
    return EstimateResult(req, out.fit, out.dose_response, out.contrasts, True)
