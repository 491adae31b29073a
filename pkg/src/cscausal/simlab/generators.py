"""Data generators for the simulation designs.

Every generator takes ``(n, rng, params)`` and returns a :class:`Simulated`
draw: the observed dataset (true exposures hidden in ``a_true``) and the
measurement-error covariance the corrected estimators should be given.  That
covariance is the true one, except in designs that estimate it from pilot
replicates.

Where a normal distribution is written ``N(m, s)`` for a covariate or an
outcome, ``s`` is taken as a standard deviation, so ``l_var = 0.36**2`` and
``l2_var = 0.16**2``; exposure conditionals use the variance.  This is the
reading under which the generated data reproduce the published reliabilities
and standard errors.  Every scale is a parameter and can be overridden.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..core import Dataset, MeCovariance, as_me_covariance
from ..errors import SpecificationError

SIM1_VAR_A = 1.0 / 12.0 + 0.25
SIM1_Y_SD = 0.16
SIM2_L_VAR = 0.36**2
SIM3_L2_VAR = 0.16**2


@dataclass(frozen=True, eq=False)
class Simulated:
    data: Dataset
    sigma_me: MeCovariance
    extras: dict = field(default_factory=dict)


def _sim2_var_a(mult: float, l_var: float) -> float:
    # Var(c L^2) + 1 with L ~ N(0, v): c^2 * 2 v^2 + 1
    return mult**2 * 2.0 * l_var**2 + 1.0


def _sim2_exposures(n, rng, mult, l_var):
    l = rng.normal(0.0, np.sqrt(l_var), n)
    a = np.column_stack([mult * l**2, -mult * l**2]) + rng.standard_normal((n, 2))
    return l, a


def _sim2_dataset(l, a, a_star, rng):
    y = a[:, 0] + a[:, 1] + l + rng.standard_normal(l.size)
    return Dataset(y, l[:, None], a_star, covariate_names=("L",), exposure_names=("A1", "A2"), a_true=a)


def sim1(n, rng, params) -> Simulated:
    s2 = params.get("sigma2_me", 0.05)
    l = rng.uniform(0.0, 1.0, n)
    a = l + 0.5 * rng.standard_normal(n)
    y = 0.25 * a + 0.5 * a**2 - 0.5 * a**3 + l + params.get("y_sd", SIM1_Y_SD) * rng.standard_normal(n)
    a_star = a + np.sqrt(s2) * rng.standard_normal(n)
    data = Dataset(y, l[:, None], a_star[:, None], covariate_names=("L",), exposure_names=("A",), a_true=a[:, None])
    return Simulated(data, as_me_covariance([[s2]]))


def sim2(n, rng, params) -> Simulated:
    s2 = params.get("sigma2_me", 0.2)
    mult = params.get("mean_multiplier", 1.0)
    l, a = _sim2_exposures(n, rng, mult, params.get("l_var", SIM2_L_VAR))
    a_star = a + np.sqrt(s2) * rng.standard_normal((n, 2))
    return Simulated(_sim2_dataset(l, a, a_star, rng), as_me_covariance(np.diag([s2, s2])))


def reliability_sweep(n, rng, params) -> Simulated:
    r = params.get("reliability", 0.8)
    s2 = float(reliability_to_sigma("sim2", r, params).sigma[0, 0])
    return sim2(n, rng, dict(params, sigma2_me=s2))


def positivity(n, rng, params) -> Simulated:
    return sim2(n, rng, dict(params, mean_multiplier=params.get("mean_multiplier", 4.0)))


def _pilot_sigma(n_p, k, make_replicates) -> MeCovariance:
    from ..estimators.auxiliary import me_covariance_from_replicates

    reps = make_replicates(n_p, k)  # (n_p, k, m)
    m = reps.shape[2]
    groups = np.repeat(np.arange(n_p), k)
    return me_covariance_from_replicates(reps.reshape(n_p * k, m), groups)


def estimated_sigma(n, rng, params) -> Simulated:
    out = sim2(n, rng, params)
    s2 = params.get("sigma2_me", 0.2)
    n_p, k = params.get("n_pilot", 100), params.get("k", 5)
    l_var = params.get("l_var", SIM2_L_VAR)

    def reps(n_p, k):
        _, a = _sim2_exposures(n_p, rng, 1.0, l_var)
        return a[:, None, :] + np.sqrt(s2) * rng.standard_normal((n_p, k, 2))

    sigma_hat = _pilot_sigma(n_p, k, reps)
    return Simulated(out.data, sigma_hat, {"sigma_true": out.sigma_me})


def multiplicative_sigma2(reliability: float, l_var: float = SIM2_L_VAR) -> float:
    """Error variance of A* = A eps, eps ~ N(1, s2), giving Var(A)/Var(A*) = r.

    Var(A*) = Var(A) + s2 E[A^2], so s2 = Var(A) (1 - r) / (r E[A^2]).
    """
    _check_reliability(reliability)
    var_a = _sim2_var_a(1.0, l_var)
    ea2 = var_a + l_var**2  # E[A1] = E[L^2] = l_var
    return var_a * (1.0 - reliability) / (reliability * ea2)


def multiplicative(n, rng, params) -> Simulated:
    l_var = params.get("l_var", SIM2_L_VAR)
    s2 = multiplicative_sigma2(params.get("reliability", 0.8), l_var)
    l, a = _sim2_exposures(n, rng, 1.0, l_var)
    a_star = a * (1.0 + np.sqrt(s2) * rng.standard_normal((n, 2)))
    data = _sim2_dataset(l, a, a_star, rng)
    n_p, k = params.get("n_pilot", 100), params.get("k", 5)

    def reps(n_p, k):
        _, ap = _sim2_exposures(n_p, rng, 1.0, l_var)
        return ap[:, None, :] * (1.0 + np.sqrt(s2) * rng.standard_normal((n_p, k, 2)))

    return Simulated(data, _pilot_sigma(n_p, k, reps), {"sigma2_multiplicative": s2})


def _sim3_arrays(n, rng, params):
    l2_var = params.get("l2_var", SIM3_L2_VAR)
    l1 = rng.binomial(1, 0.5, n).astype(float)
    l2 = rng.normal(0.0, np.sqrt(l2_var), n)
    a = 0.1 - 0.1 * l1 + 0.3 * l2 + 0.2 * rng.standard_normal(n)
    p = 0.35 + 0.15 * a + 0.25 * l1 + 0.2 * l2 + 0.05 * a * l1 + 0.1 * a * l2
    y = (rng.uniform(size=n) < np.clip(p, 0.0, 1.0)).astype(float)
    return l1, l2, a, y


def sim3(n, rng, params) -> Simulated:
    s2 = params.get("sigma2_me", 0.02)
    l1, l2, a, y = _sim3_arrays(n, rng, params)
    a_star = a + np.sqrt(s2) * rng.standard_normal(n)
    data = Dataset(
        y, np.column_stack([l1, l2]), a_star[:, None],
        case_indicator=y, covariate_names=("L1", "L2"), exposure_names=("A",), a_true=a[:, None],
    )
    return Simulated(data, as_me_covariance([[s2]]))


def two_phase(n, rng, params) -> Simulated:
    """Case-cohort sample from sim3: every case plus a Bernoulli(f) sub-cohort."""
    from ..estimators.auxiliary import two_phase_sample

    full = sim3(n, rng, params)
    f = params.get("subcohort", 0.10)
    sub = rng.uniform(size=n) < f
    selected = sub | (full.data.case_indicator == 1)
    return Simulated(two_phase_sample(full.data, selected), full.sigma_me, {"n_full": n})


GENERATORS: dict[str, Callable] = {
    "sim1": sim1,
    "sim2": sim2,
    "sim3": sim3,
    "reliability_sweep": reliability_sweep,
    "estimated_sigma": estimated_sigma,
    "positivity": positivity,
    "multiplicative": multiplicative,
    "two_phase": two_phase,
}


def _check_reliability(r):
    if not 0.0 < r <= 1.0:
        raise ValueError(f"reliability must lie in (0, 1], got {r}")


def exposure_variance(design: str, params: dict | None = None) -> float:
    """Analytic Var(A) (per exposure) implied by a design's generator."""
    params = params or {}
    if design == "sim1":
        return SIM1_VAR_A
    if design in ("sim2", "reliability_sweep", "estimated_sigma", "multiplicative"):
        return _sim2_var_a(1.0, params.get("l_var", SIM2_L_VAR))
    if design == "positivity":
        return _sim2_var_a(params.get("mean_multiplier", 4.0), params.get("l_var", SIM2_L_VAR))
    if design in ("sim3", "two_phase"):
        return 0.1**2 * 0.25 + 0.3**2 * params.get("l2_var", SIM3_L2_VAR) + 0.04
    raise SpecificationError(f"unknown design {design!r}; available: {', '.join(GENERATORS)}")


def reliability_to_sigma(design: str, reliability: float, params: dict | None = None) -> MeCovariance:
    """Additive error covariance giving reliability Var(A)/Var(A*) = r per exposure."""
    _check_reliability(reliability)
    var_a = exposure_variance(design, params)
    m = 2 if design in ("sim2", "reliability_sweep", "estimated_sigma", "multiplicative", "positivity") else 1
    return as_me_covariance(np.eye(m) * var_a * (1.0 - reliability) / reliability)


def generate(design: str, n: int, rng: np.random.Generator, params: dict | None = None) -> Simulated:
    try:
        gen = GENERATORS[design]
    except KeyError:
        raise SpecificationError(f"unknown design {design!r}; available: {', '.join(GENERATORS)}") from None
    if n < 1:
        raise ValueError("n must be at least 1")
    return gen(n, rng, dict(params or {}))
