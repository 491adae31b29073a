"""Stacked g-formula, IPW and doubly robust estimating equations.

Each estimator is one square system of estimating equations.  The rows are
the (possibly corrected) mean-model score, the standardization rows
``eta(a) - mu(L, a; beta)`` and the propensity moment equations.  The
system is block-triangular, so it is solved in stages.  First come the
propensity parameters in closed form, then the score coefficients with the
weights held fixed, then ``eta`` in closed form.  The sandwich always uses
the full stack.  If the staged point is not a root of the full system, a
joint Newton solve takes over.
"""

from __future__ import annotations

import numpy as np

from ..core import Dataset, FitResult, MeCovariance, ParameterVector, as_me_covariance
from ..cscore import PerturbationBank, complex_link, draw_perturbations, mccs_function
from ..errors import CollinearityError, DimensionError, SpecificationError
from ..mestim import Block, EstimatingFunction, delta_method, linear_contrast, sandwich, solve
from ..models import PropensityEquations, PropensityModel, PropensitySpec, log_weight_coefficients
from .request import DoseResponse, Estimate, EstimateResult, EstimatorRequest, contrast_label, point_label
from .scores import MeanScore


def _known_weight_terms(ps: PropensityModel, l: np.ndarray):
    mu_l = ps.conditional_means(l)
    terms = [
        (j,) + tuple(log_weight_coefficients(mu_l[:, k], ps.delta2[k], ps.mu[k], ps.tau2[k]))
        for k, j in enumerate(ps.exposures)
    ]
    return lambda theta: terms


class StackedProblem:
    """One estimator's estimating equations on one dataset.

    ``data.a_star`` holds whatever exposures the fit should treat as measured
    (true ones for an oracle fit, imputed ones for regression calibration).
    ``sigma`` only enters the propensity variance corrections, and ``bank``
    switches on the Monte-Carlo corrected score.
    """

    def __init__(self, req: EstimatorRequest, data: Dataset, sigma: MeCovariance, bank: PerturbationBank | None):
        self.req = req
        self.data = data
        self.n = n = data.n
        self.weights = data.sample_weight
        self.bank = bank
        method = req.method
        model = req.msm if method == "ipw" else req.outcome
        self.design = model.design.compile(data.covariate_names, data.exposure_names)
        self.link = model.link
        if method == "ipw" and not self.design.covariate_free:
            raise SpecificationError("the marginal structural model may only contain exposure terms")
        if method == "dr" and self.link == "log" and any(c and e for c, e in self.design.compiled):
            raise SpecificationError("dr with the log link does not allow exposure-covariate interactions")

        k = self.design.width
        prefix = "gamma" if method == "ipw" else "beta"
        parts = [(prefix, np.zeros(k), [f"{prefix}:{lab}" for lab in model.design.labels()])]
        self.coef = np.arange(k)
        pos = k

        self.eta = None
        if method in ("gformula", "dr"):
            grid = req.grid
            if grid.shape[1] != data.m:
                raise DimensionError(f"dose grid has {grid.shape[1]} exposure column(s), data have {data.m}")
            g = len(grid)
            self.eta = np.arange(pos, pos + g)
            pos += g
            parts.append(("eta", np.zeros(g), [point_label(a) for a in grid]))
            self.grid_x = self.design.matrix(data.l, np.broadcast_to(grid[None], (n,) + grid.shape))

        self.ps_eqs = None
        self.ps = np.arange(0)
        weight_terms, weight_exposures = None, ()
        ps_start = None
        if isinstance(req.propensity, PropensitySpec):
            eqs = PropensityEquations(req.propensity, data, sigma)
            self.ps_eqs = eqs
            self.ps = np.arange(pos, pos + eqs.rows)
            sl = slice(pos, pos + eqs.rows)
            xi_lab, zeta_lab = eqs.labels()
            split = eqs.layout.xi_size
            parts += [("xi", np.zeros(split), xi_lab), ("zeta", np.zeros(eqs.rows - split), zeta_lab)]

            def weight_terms(theta, _eqs=eqs, _sl=sl):
                return [(j,) + tuple(t) for j, t in zip(_eqs.exposures, _eqs.log_weight_terms(theta[_sl]))]

            weight_exposures = eqs.exposures
            ps_start = eqs.closed_form(self.weights)
        elif isinstance(req.propensity, PropensityModel):
            weight_terms = _known_weight_terms(req.propensity, data.l)
            weight_exposures = req.propensity.exposures

        self.template = ParameterVector.from_blocks(parts)
        self.dim = len(self.template)
        self.theta0 = self.template.values.copy()
        if ps_start is not None:
            self.theta0[self.ps] = ps_start

        self.score = MeanScore(self.design, self.link, data.y, data.l, self.coef, weight_terms, weight_exposures)
        if req.weight_cap_quantile is not None and weight_terms is not None:
            sw = np.real(self.score.stabilized_weight(self.theta0, self._powers(data.a_star, weight_exposures), 0))
            self.score.cap = float(np.quantile(sw, req.weight_cap_quantile))
        self.naive_fn = mccs_function(self.score, data.a_star, None)
        self.score_fn = mccs_function(self.score, data.a_star, bank)

        blocks = [Block("score", k, self.score_fn, np.concatenate([self.coef, self.ps]))]
        if self.eta is not None:
            blocks.append(Block("eta", len(self.eta), self._eta_rows, np.concatenate([self.coef, self.eta])))
        if self.ps_eqs is not None:
            blocks.append(Block("propensity", len(self.ps), lambda th, _eqs=self.ps_eqs, _sl=sl: _eqs.equations(th[_sl]), self.ps))
        self.ef = EstimatingFunction(blocks, self.dim, n, self.weights)

    @staticmethod
    def _powers(a, exposures):
        return {j: (a[:, j], a[:, j] ** 2) for j in exposures}

    @property
    def corrected(self) -> bool:
        return self.bank is not None and not self.bank.is_zero

    # -- standardization rows ------------------------------------------------

    def grid_means(self, theta) -> np.ndarray:
        return np.real(complex_link(self.grid_x @ theta[self.coef], self.link))

    def _eta_rows(self, theta):
        return theta[self.eta][None, :] - self.grid_means(theta)

    def eta_closed_form(self, theta) -> np.ndarray:
        mu = self.grid_means(theta)
        if self.weights is None:
            return mu.mean(axis=0)
        return self.weights @ mu / self.weights.sum()

    # -- solving --------------------------------------------------------------

    def _reduced(self, fn, theta):
        base = theta.copy()

        def rows(c):
            full = base.copy()
            full[self.coef] = c
            return fn(full)

        return EstimatingFunction([Block("score", len(self.coef), rows)], len(self.coef), self.n, self.weights)

    def _start(self, theta) -> np.ndarray:
        """Root of the uncorrected score with the weights held fixed."""
        w = np.ones(self.n) if self.weights is None else self.weights
        a = self.data.a_star
        if self.score.weight_terms is not None:
            w = w * np.real(self.score.stabilized_weight(theta, self._powers(a, self.score.weight_exposures), 0))
        x = self.design.matrix(self.data.l, a)
        if self.link == "identity":
            xw = x * w[:, None]
            try:
                return np.linalg.solve(xw.T @ x, xw.T @ self.data.y)
            except np.linalg.LinAlgError as exc:
                raise CollinearityError("singular design in the outcome or MSM score") from exc
        c0 = np.zeros(len(self.coef))
        if self.design.spec.intercept:
            ybar = float(np.clip(w @ self.data.y / w.sum(), 1e-6, 1 - 1e-6 if self.link == "logit" else np.inf))
            c0[0] = np.log(ybar / (1 - ybar)) if self.link == "logit" else np.log(ybar)
        fit = solve(self._reduced(self.naive_fn, theta), c0, self.req.solve_options)
        return fit.theta_hat.values

    def solve(self, variance: bool = True) -> FitResult:
        opts = self.req.solve_options
        theta = self.theta0.copy()
        theta[self.coef] = self._start(theta)
        iterations = 0
        if self.corrected:
            fit = solve(self._reduced(self.score_fn, theta), theta[self.coef], opts)
            theta[self.coef] = fit.theta_hat.values
            iterations = fit.iterations
        if self.eta is not None:
            theta[self.eta] = self.eta_closed_form(theta)
        res = float(np.max(np.abs(self.ef.total(theta))))
        converged = res <= opts.tol * self.n
        if converged:
            result = FitResult(self.template.with_values(theta), *_nan2(self.dim), True, iterations, res)
        else:
            result = solve(self.ef, self.template.with_values(theta), opts)
            result = FitResult(
                result.theta_hat, result.vcov_uc, result.vcov_bc, result.converged,
                iterations + result.iterations, result.max_residual,
            )
        if variance and result.converged:
            result = sandwich(self.ef, result, opts.fd_step)
        return result

    # -- summaries -------------------------------------------------------------

    def summarize(self, fit: FitResult, point_only: bool = False) -> EstimateResult:
        req = self.req
        theta, v_uc, v_bc = fit.theta_hat.values, fit.vcov_uc, fit.vcov_bc
        dose, contrasts = None, []
        if self.eta is not None:
            se_uc, se_bc = fit.se("uc")[self.eta], fit.se("bc")[self.eta]
            dose = DoseResponse(req.grid, theta[self.eta].copy(), se_uc, se_bc, req.alpha)
            for i, j in req.contrasts:
                w = np.zeros(self.dim)
                w[self.eta[i]], w[self.eta[j]] = 1.0, -1.0
                est, su = linear_contrast(w, theta, v_uc)
                _, sb = linear_contrast(w, theta, v_bc)
                contrasts.append(Estimate(contrast_label(req.grid, i, j), est, su, sb))
        elif req.grid is not None:
            xg = self.design.matrix(np.zeros((len(req.grid), self.data.p)), req.grid)

            def eta_at(g):
                return lambda t: float(np.real(complex_link(xg[g] @ t[self.coef], self.link)))

            ests, su, sb = [], [], []
            for g in range(len(req.grid)):
                e, s1 = _delta(eta_at(g), theta, v_uc)
                _, s2 = _delta(eta_at(g), theta, v_bc)
                ests.append(e)
                su.append(s1)
                sb.append(s2)
            dose = DoseResponse(req.grid, np.array(ests), np.array(su), np.array(sb), req.alpha)
            for i, j in req.contrasts:
                gi, gj = eta_at(i), eta_at(j)
                e, s1 = _delta(lambda t: gi(t) - gj(t), theta, v_uc)
                _, s2 = _delta(lambda t: gi(t) - gj(t), theta, v_bc)
                contrasts.append(Estimate(contrast_label(req.grid, i, j), e, s1, s2))
        return EstimateResult(req, fit, dose, tuple(contrasts), point_only)


def _nan2(q):
    nan = np.full((q, q), np.nan)
    return nan, nan.copy()


def _delta(g, theta, vcov):
    if not np.all(np.isfinite(vcov)):
        return float(g(theta)), float("nan")
    return delta_method(g, theta, vcov)


def problem_for(req: EstimatorRequest, data: Dataset, sigma=None, corrected: bool = False) -> StackedProblem:
    """Build the stacked problem; ``corrected`` draws the perturbation bank."""
    sigma = as_me_covariance(sigma, data.m)
    bank = None
    if corrected:
        bank = draw_perturbations(data.n, req.draws, sigma, req.seed, req.antithetic)
    return StackedProblem(req, data, sigma, bank)
