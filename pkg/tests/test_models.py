import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cscausal.core import Dataset
from cscausal.errors import InfeasibleErrorVarianceError, SpecificationError
from cscausal.models import (
    DesignSpec,
    MeanModel,
    PropensityModel,
    PropensitySpec,
    evaluate_mean,
    fit_propensity,
    mean_gradient,
    stabilized_weight,
)
from cscausal.simlab import generate

A_ONLY = DesignSpec((("A",),))
CUBIC = DesignSpec((("A",), ("A", "A"), ("A", "A", "A"), ("L",)))


def compile_(spec, covs=("L",), exps=("A",)):
    return spec.compile(covs, exps)


def test_design_labels_and_width():
    assert CUBIC.labels() == ["1", "A", "A^2", "A^3", "L"]
    assert CUBIC.width == 5
    assert DesignSpec((("A", "L"),), intercept=False).labels() == ["A*L"]


def test_design_rejects_unknown_column_and_empty_term():
    with pytest.raises(SpecificationError, match="Z"):
        DesignSpec((("Z",),)).compile(("L",), ("A",))
    with pytest.raises(SpecificationError):
        DesignSpec(((),))


def test_msm_example():
    d = compile_(A_ONLY, covs=())
    assert evaluate_mean(d, "identity", np.zeros((1, 0)), np.array([[1.0]]), [0.475, 0.175])[0] == pytest.approx(0.65)


def test_zero_coefficients_identity():
    d = compile_(CUBIC)
    assert evaluate_mean(d, "identity", [[0.3]], np.array([[1.7]]), np.zeros(5))[0] == 0.0


def test_sim1_outcome_example():
    d = compile_(CUBIC)
    val = evaluate_mean(d, "identity", [[0.0]], np.array([[1.0]]), [0.0, 0.25, 0.5, -0.5, 1.0])[0]
    assert val == pytest.approx(0.25)


def test_complex_exposure_with_zero_imaginary_part_is_real_evaluation(rng):
    d = compile_(CUBIC)
    l, a, b = rng.standard_normal((4, 1)), rng.standard_normal((4, 1)), rng.standard_normal(5)
    for link in ("identity", "log", "logit"):
        real = evaluate_mean(d, link, l, a, 0.2 * b)
        cplx = evaluate_mean(d, link, l, a + 0j, 0.2 * b)
        assert np.array_equal(real, cplx.real) and np.all(cplx.imag == 0)


def test_complex_powers_are_repeated_products():
    d = compile_(DesignSpec((("A", "A", "A"),), intercept=False))
    z = 0.3 + 0.4j
    x = d.matrix(np.zeros((1, 1)), np.array([[z]]))
    assert x[0, 0] == pytest.approx(z * z * z, abs=1e-15)


def test_gradient_identity_and_log_at_zero(rng):
    d = compile_(CUBIC)
    l, a = rng.standard_normal((3, 1)), rng.standard_normal((3, 1))
    x = d.matrix(l, a)
    assert np.array_equal(mean_gradient(d, "identity", l, a, rng.standard_normal(5)), x)
    assert np.allclose(mean_gradient(d, "log", l, a, np.zeros(5)), x)


@given(st.sampled_from(["identity", "log", "logit"]), st.integers(0, 2**31))
def test_gradient_matches_finite_differences(link, seed):
    rng = np.random.default_rng(seed)
    d = compile_(DesignSpec((("A",), ("L",), ("A", "L"))))
    l, a = rng.uniform(-1, 1, (1, 1)), rng.uniform(-1, 1, (1, 1))
    b = rng.uniform(-1, 1, 4)
    g = mean_gradient(d, link, l, a, b)[0]
    h = 1e-5
    fd = np.array([(evaluate_mean(d, link, l, a, b + h * e)[0] - evaluate_mean(d, link, l, a, b - h * e)[0]) / (2 * h)
                   for e in np.eye(4)])
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_mean_model_rejects_unknown_link():
    with pytest.raises(SpecificationError):
        MeanModel(A_ONLY, "probit")


def _ps(mu_l_coef, delta2, mu, tau2):
    design = DesignSpec((("L",),)).compile(("L",), ())
    return PropensityModel((0,), (design,), (np.asarray(mu_l_coef, float),), np.array([delta2]), np.array([mu]),
                           np.array([tau2]))


def test_sw_is_one_when_densities_agree(rng):
    ps = _ps([0.4, 0.0], 1.3, 0.4, 1.3)
    l, a = rng.standard_normal((10, 1)), rng.standard_normal((10, 1))
    assert np.allclose(stabilized_weight(ps, l, a), 1.0, atol=1e-14)


def test_sw_matches_density_ratio():
    # sim-2 style parameters at a = 0, l = 0
    ps = _ps([0.5, 1.0], 1.0, 0.1296, 1.0336)
    got = stabilized_weight(ps, np.zeros((1, 1)), np.zeros((1, 1)))[0]
    ref = stats.norm.pdf(0, 0.1296, np.sqrt(1.0336)) / stats.norm.pdf(0, 0.5, 1.0)
    assert got == pytest.approx(ref, rel=1e-12)


def test_sw_product_over_exposures(rng):
    d = DesignSpec((("L",),)).compile(("L",), ())
    ps = PropensityModel((0, 1), (d, d), (np.array([0.1, 0.5]), np.array([-0.2, 0.3])), np.array([0.8, 1.1]),
                         np.array([0.0, 0.1]), np.array([1.2, 1.5]))
    l, a = rng.standard_normal((5, 1)), rng.standard_normal((5, 2))
    ref = np.ones(5)
    for k, (z, dl, m, t) in enumerate([((0.1, 0.5), 0.8, 0.0, 1.2), ((-0.2, 0.3), 1.1, 0.1, 1.5)]):
        mu_l = z[0] + z[1] * l[:, 0]
        ref *= stats.norm.pdf(a[:, k], m, np.sqrt(t)) / stats.norm.pdf(a[:, k], mu_l, np.sqrt(dl))
    assert np.allclose(stabilized_weight(ps, l, a), ref, rtol=1e-12)


def test_propensity_model_requires_positive_variances():
    with pytest.raises(InfeasibleErrorVarianceError):
        _ps([0.0, 0.0], 0.0, 0.0, 1.0)


def test_fit_propensity_no_error_is_least_squares(rng):
    n = 300
    l = rng.standard_normal((n, 2))
    a = 0.5 + l @ [0.3, -0.4] + rng.standard_normal(n)
    data = Dataset(rng.standard_normal(n), l, a, covariate_names=("L1", "L2"), exposure_names=("A",))
    model, _ = fit_propensity(data, np.zeros((1, 1)), PropensitySpec({"A": DesignSpec((("L1",), ("L2",)))}))
    z = np.column_stack([np.ones(n), l])
    coef = np.linalg.lstsq(z, a, rcond=None)[0]
    assert np.allclose(model.zeta[0], coef, atol=1e-10)
    assert model.delta2[0] == pytest.approx(np.mean((a - z @ coef) ** 2), rel=1e-10)
    assert model.tau2[0] == pytest.approx(np.var(a), rel=1e-10)


def test_fit_propensity_is_root_of_equations(rng):
    sim = generate("sim2", 500, rng)
    spec = PropensitySpec({"A1": DesignSpec((("L", "L"),)), "A2": DesignSpec((("L", "L"),))})
    model, eqs = fit_propensity(sim.data, sim.sigma_me, spec)
    theta = model.to_vector(eqs.layout)
    assert np.max(np.abs(eqs.equations(theta).sum(axis=0))) < 1e-9


def test_fit_propensity_infeasible_sigma(rng):
    sim = generate("sim2", 200, rng)
    spec = PropensitySpec({"A1": DesignSpec((("L", "L"),))})
    with pytest.raises(InfeasibleErrorVarianceError):
        fit_propensity(sim.data, np.diag([5.0, 5.0]), spec)


def test_propensity_spec_rejects_exposure_terms(rng):
    sim = generate("sim2", 50, rng)
    with pytest.raises(SpecificationError):
        fit_propensity(sim.data, sim.sigma_me, PropensitySpec({"A1": DesignSpec((("A2",),))}))


@pytest.mark.slow
def test_corrected_conditional_variance_large_sample():
    # A|L ~ N(L^2, 1) with Var(eps) = 0.2: the corrected residual variance targets 1.
    sim = generate("sim2", 10**6, np.random.default_rng(5), {"l_var": 0.36})
    spec = PropensitySpec({"A1": DesignSpec((("L", "L"),))})
    model, eqs = fit_propensity(sim.data, sim.sigma_me, spec)
    r = sim.data.a_star[:, 0] - eqs.z[0] @ model.zeta[0]
    se = np.std(r * r) / np.sqrt(sim.data.n)
    assert abs(model.delta2[0] - 1.0) <= 4 * se


@pytest.mark.slow
@pytest.mark.parametrize("l_var, expected", [(0.36, 2 * 0.36**2 + 1), (0.36**2, 2 * 0.36**4 + 1)])
def test_corrected_marginal_variance_large_sample(l_var, expected):
    # Var(A1) = Var(L^2) + 1 = 2 v^2 + 1 for L ~ N(0, v).
    sim = generate("sim2", 10**6, np.random.default_rng(6), {"l_var": l_var})
    model, _ = fit_propensity(sim.data, sim.sigma_me, PropensitySpec({"A1": DesignSpec(())}))
    a = sim.data.a_star[:, 0]
    se = np.std((a - a.mean()) ** 2) / np.sqrt(a.size)
    assert abs(model.tau2[0] - expected) <= 4 * se


@pytest.mark.slow
def test_stabilized_weight_has_unit_mean():
    sim = generate("sim2", 10**6, np.random.default_rng(7))
    d = DesignSpec((("L", "L"),)).compile(("L",), ())
    l_var = 0.36**2
    var_a = 2 * l_var**2 + 1
    # true propensities: A1|L ~ N(L^2, 1), A1 ~ marginal moments (normal numerator)
    ps = PropensityModel((0,), (d,), (np.array([0.0, 1.0]),), np.array([1.0]), np.array([l_var]), np.array([var_a]))
    sw = np.real(stabilized_weight(ps, sim.data.l, sim.data.a_true))
    assert abs(sw.mean() - 1.0) <= 4 * sw.std() / np.sqrt(sw.size)
