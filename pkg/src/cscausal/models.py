"""Outcome models, marginal structural models and normal propensity models."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Dataset, MeCovariance, as_me_covariance
from .cscore import LINKS, cexp, complex_link, complex_link_derivative
from .errors import InfeasibleErrorVarianceError, SpecificationError


@dataclass(frozen=True)
class DesignSpec:
    """Explicit design: each term is a multiset of column names.

    A name repeated k times in a term is raised to the k-th power, so
    ``("A", "A")`` is A squared and ``("A", "L1")`` the A-by-L1 product.
    """

    terms: tuple[tuple[str, ...], ...] = ()
    intercept: bool = True

    def __post_init__(self):
        terms = tuple(tuple(str(f) for f in t) for t in self.terms)
        if any(len(t) == 0 for t in terms):
            raise SpecificationError("empty design term; use intercept=True for the constant")
        object.__setattr__(self, "terms", terms)

    @property
    def width(self) -> int:
        return len(self.terms) + int(self.intercept)

    def labels(self) -> list[str]:
        out = ["1"] if self.intercept else []
        for t in self.terms:
            parts = []
            for name, k in Counter(t).items():
                parts.append(name if k == 1 else f"{name}^{k}")
            out.append("*".join(parts))
        return out

    def compile(self, covariate_names: Sequence[str], exposure_names: Sequence[str]) -> "Design":
        cov = {c: j for j, c in enumerate(covariate_names)}
        exp = {a: j for j, a in enumerate(exposure_names)}
        compiled = []
        for t in self.terms:
            ci, ei = [], []
            for f in t:
                if f in exp:
                    ei.append(exp[f])
                elif f in cov:
                    ci.append(cov[f])
                else:
                    raise SpecificationError(f"design term {'*'.join(t)!r} references unknown column {f!r}")
            compiled.append((tuple(ci), tuple(ei)))
        return Design(self, tuple(compiled), len(covariate_names), len(exposure_names))


@dataclass(frozen=True)
class Design:
    spec: DesignSpec
    compiled: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    p: int
    m: int

    @property
    def width(self) -> int:
        return self.spec.width

    @property
    def exposure_free(self) -> bool:
        return all(not e for _, e in self.compiled)

    @property
    def covariate_free(self) -> bool:
        return all(not c for c, _ in self.compiled)

    def matrix(self, l: np.ndarray, a: np.ndarray | None) -> np.ndarray:
        """Design matrix at covariates ``l (n, p)`` and exposures ``a``.

        ``a`` may be ``(n, m)`` or ``(n, B, m)``, real or complex; powers are
        repeated complex products.  The result has shape ``a.shape[:-1] + (k,)``.
        """
        n = l.shape[0]
        lead = (n,) if a is None else a.shape[:-1]
        dtype = float if a is None else np.result_type(a.dtype, float)
        lx = l.reshape((n,) + (1,) * (len(lead) - 1) + (l.shape[1],))
        out = np.empty(lead + (self.width,), dtype=dtype)
        k = 0
        if self.spec.intercept:
            out[..., 0] = 1.0
            k = 1
        for ci, ei in self.compiled:
            v = None
            for j in ci:
                v = lx[..., j] if v is None else v * lx[..., j]
            for j in ei:
                v = a[..., j] if v is None else v * a[..., j]
            out[..., k] = v
            k += 1
        return out


@dataclass(frozen=True)
class MeanModel:
    """``g^{-1}(design @ coef)``; used for outcome models and MSMs."""

    design: DesignSpec
    link: str = "identity"

    def __post_init__(self):
        if self.link not in LINKS:
            raise SpecificationError(f"unknown link {self.link!r}; expected one of {LINKS}")


OutcomeModel = MeanModel


def MsmSpec(design: DesignSpec, link: str = "identity") -> MeanModel:
    return MeanModel(design, link)


def real_dot(x, coef):
    """``x @ coef`` for real coefficients, with real and imaginary parts kept apart."""
    if np.iscomplexobj(x):
        return x.real @ coef + 1j * (x.imag @ coef)
    return x @ coef


def linear_predictor(design: Design, l, a, coef):
    x = design.matrix(l, a)
    return real_dot(x, np.asarray(coef, dtype=float)), x


def evaluate_mean(design: Design, link: str, l, a, coef):
    lp, _ = linear_predictor(design, np.atleast_2d(l), a, coef)
    return complex_link(lp, link)


def mean_gradient(design: Design, link: str, l, a, coef):
    """Gradient of the mean with respect to the coefficients."""
    lp, x = linear_predictor(design, np.atleast_2d(l), a, coef)
    return complex_link_derivative(lp, link)[..., None] * x


# ---------------------------------------------------------------------------
# Propensity models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropensitySpec:
    """Normal linear models for each exposure given covariates.

    ``conditional`` maps exposure name to a covariate-only design (the
    denominator model).  Exposures not listed are left out of the weights.
    The numerator model is intercept-only normal.
    """

    conditional: tuple[tuple[str, DesignSpec], ...]

    def __post_init__(self):
        items = tuple(self.conditional.items()) if isinstance(self.conditional, dict) else tuple(self.conditional)
        object.__setattr__(self, "conditional", items)


@dataclass(frozen=True, eq=False)
class PropensityModel:
    """Fitted (or known) normal propensity models for ``k`` exposures."""

    exposures: tuple[int, ...]
    designs: tuple[Design, ...]
    zeta: tuple[np.ndarray, ...]
    delta2: np.ndarray
    mu: np.ndarray
    tau2: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if np.any(np.asarray(self.delta2) <= 0) or np.any(np.asarray(self.tau2) <= 0):
            raise InfeasibleErrorVarianceError("propensity variances must be positive")

    def conditional_means(self, l) -> np.ndarray:
        l = np.atleast_2d(l)
        return np.column_stack([d.matrix(l, None) @ z for d, z in zip(self.designs, self.zeta)])

    def to_vector(self, layout: "PropensityLayout") -> np.ndarray:
        theta = np.empty(layout.size)
        for k in range(len(self.exposures)):
            theta[layout.mu[k]] = self.mu[k]
            theta[layout.tau2[k]] = self.tau2[k]
            theta[layout.zeta[k]] = self.zeta[k]
            theta[layout.delta2[k]] = self.delta2[k]
        return theta


def log_weight_coefficients(mu_l, delta2, mu, tau2):
    """Coefficients of ``log SW = b1 a^2 + b2 a + b3``; ``b3`` absorbs ``log(delta/tau)``."""
    b1 = 0.5 * (1.0 / delta2 - 1.0 / tau2)
    b2 = mu / tau2 - mu_l / delta2
    b3 = 0.5 * (mu_l**2 / delta2 - mu**2 / tau2) + 0.5 * np.log(delta2 / tau2)
    return b1, b2, b3


def stabilized_weight(ps: PropensityModel, l, a):
    """Product over exposures of ``N(a; mu, tau2) / N(a; mu_l, delta2)``.

    ``a`` may be ``(n, m)`` or ``(n, B, m)`` and complex; the density ratio is
    written as ``exp(b1 a^2 + b2 a + b3)`` so complex exposures go through a
    single guarded complex exponential.
    """
    l = np.atleast_2d(l)
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[None, :]
    mu_l = ps.conditional_means(l)
    extra = (1,) * (a.ndim - 2)
    expo = 0.0
    for k, j in enumerate(ps.exposures):
        b1, b2, b3 = log_weight_coefficients(mu_l[:, k], ps.delta2[k], ps.mu[k], ps.tau2[k])
        aj = a[..., j]
        expo = expo + b1 * aj * aj + b2.reshape((-1,) + extra) * aj + b3.reshape((-1,) + extra)
    return cexp(expo)


@dataclass(frozen=True)
class PropensityLayout:
    """Positions of propensity parameters inside a flat vector.

    ``xi`` holds (mu_k, tau2_k) per exposure; ``zeta`` holds the conditional
    coefficients followed by delta2_k per exposure.
    """

    mu: tuple[int, ...]
    tau2: tuple[int, ...]
    zeta: tuple[slice, ...]
    delta2: tuple[int, ...]
    xi_size: int
    size: int

    @classmethod
    def build(cls, widths: Sequence[int], offset: int = 0) -> "PropensityLayout":
        k = len(widths)
        mu = tuple(offset + 2 * j for j in range(k))
        tau2 = tuple(offset + 2 * j + 1 for j in range(k))
        pos = offset + 2 * k
        zeta, delta2 = [], []
        for w in widths:
            zeta.append(slice(pos, pos + w))
            delta2.append(pos + w)
            pos += w + 1
        return cls(mu, tau2, tuple(zeta), tuple(delta2), 2 * k, pos - offset)

    def shifted(self, offset: int) -> "PropensityLayout":
        return PropensityLayout(
            tuple(i + offset for i in self.mu),
            tuple(i + offset for i in self.tau2),
            tuple(slice(s.start + offset, s.stop + offset) for s in self.zeta),
            tuple(i + offset for i in self.delta2),
            self.xi_size,
            self.size,
        )

    @property
    def indices(self) -> np.ndarray:
        start = self.mu[0]
        return np.arange(start, start + self.size)


class PropensityEquations:
    """Estimating equations for normal propensity models with a mismeasured outcome.

    For exposure j with conditional design Z_j the rows are

        (A*_j - Z_j zeta_j) Z_j,  (A*_j - Z_j zeta_j)^2 - S_jj - delta2_j,
        A*_j - mu_j,              (A*_j - mu_j)^2 - S_jj - tau2_j,

    where S = Sigma_me; classical additive error leaves the mean models
    unbiased and inflates the residual variances by S_jj.
    """

    def __init__(self, spec: PropensitySpec, data: Dataset, sigma: MeCovariance, a=None):
        names = [e for e, _ in spec.conditional]
        unknown = [e for e in names if e not in data.exposure_names]
        if unknown:
            raise SpecificationError(f"propensity model names unknown exposure(s) {unknown}")
        self.names = tuple(names)
        self.exposures = tuple(data.exposure_names.index(e) for e in names)
        self.designs = []
        for e, d in spec.conditional:
            design = d.compile(data.covariate_names, ())
            if not design.exposure_free:
                raise SpecificationError(f"propensity design for {e} may only use covariates")
            self.designs.append(design)
        self.designs = tuple(self.designs)
        self.z = tuple(d.matrix(data.l, None) for d in self.designs)
        self.a = np.asarray(data.a_star if a is None else a, dtype=float)
        self.me_var = np.array([sigma.sigma[j, j] for j in self.exposures])
        self.layout = PropensityLayout.build([d.width for d in self.designs])
        self.n = data.n
        self.rows = self.layout.size

    def labels(self) -> tuple[list[str], list[str]]:
        xi, zeta = [], []
        for name, design in zip(self.names, self.designs):
            xi += [f"xi:mu[{name}]", f"xi:tau2[{name}]"]
            zeta += [f"zeta:{name}~{lab}" for lab in design.spec.labels()] + [f"zeta:delta2[{name}]"]
        return xi, zeta

    def closed_form(self, weights=None) -> np.ndarray:
        """Exact root of the (weighted) propensity rows."""
        w = np.ones(self.n) if weights is None else np.asarray(weights, dtype=float)
        sw = w.sum()
        theta = np.empty(self.layout.size)
        for k, j in enumerate(self.exposures):
            aj = self.a[:, j]
            z = self.z[k]
            zw = z * w[:, None]
            coef = np.linalg.lstsq(zw.T @ z, zw.T @ aj, rcond=None)[0]
            resid = aj - z @ coef
            delta2 = float(w @ resid**2 / sw - self.me_var[k])
            mu = float(w @ aj / sw)
            tau2 = float(w @ (aj - mu) ** 2 / sw - self.me_var[k])
            if delta2 <= 0 or tau2 <= 0:
                raise InfeasibleErrorVarianceError(
                    f"assumed measurement-error variance {self.me_var[k]:.4g} for {self.names[k]} "
                    f"exceeds the observed residual variance"
                )
            theta[self.layout.mu[k]] = mu
            theta[self.layout.tau2[k]] = tau2
            theta[self.layout.zeta[k]] = coef
            theta[self.layout.delta2[k]] = delta2
        return theta

    def equations(self, theta_ps: np.ndarray) -> np.ndarray:
        out = np.empty((self.n, self.layout.size))
        for k, j in enumerate(self.exposures):
            aj = self.a[:, j]
            lay = self.layout
            r = aj - self.z[k] @ theta_ps[lay.zeta[k]]
            out[:, lay.zeta[k]] = r[:, None] * self.z[k]
            out[:, lay.delta2[k]] = r * r - self.me_var[k] - theta_ps[lay.delta2[k]]
            dm = aj - theta_ps[lay.mu[k]]
            out[:, lay.mu[k]] = dm
            out[:, lay.tau2[k]] = dm * dm - self.me_var[k] - theta_ps[lay.tau2[k]]
        return out

    def model(self, theta_ps: np.ndarray) -> PropensityModel:
        lay = self.layout
        k = range(len(self.exposures))
        return PropensityModel(
            exposures=self.exposures,
            designs=self.designs,
            zeta=tuple(np.array(theta_ps[lay.zeta[i]]) for i in k),
            delta2=np.array([theta_ps[lay.delta2[i]] for i in k]),
            mu=np.array([theta_ps[lay.mu[i]] for i in k]),
            tau2=np.array([theta_ps[lay.tau2[i]] for i in k]),
            names=self.names,
        )

    def log_weight_terms(self, theta_ps: np.ndarray):
        """Per-exposure ``(b1, b2[n], b3[n])`` of the log stabilized weight."""
        lay = self.layout
        out = []
        for k in range(len(self.exposures)):
            mu_l = self.z[k] @ theta_ps[lay.zeta[k]]
            out.append(
                log_weight_coefficients(mu_l, theta_ps[lay.delta2[k]], theta_ps[lay.mu[k]], theta_ps[lay.tau2[k]])
            )
        return out


def fit_propensity(data: Dataset, sigma, spec: PropensitySpec, weights=None) -> tuple[PropensityModel, PropensityEquations]:
    """Fit normal propensity models from the measured exposures.

    Mean coefficients come from (weighted) least squares of A*_j on the
    covariate design; the residual and marginal variances are corrected by
    subtracting the measurement-error variance.  Variances use the
    estimating-equation (divide-by-n) form so the result is the exact root
    of the stacked propensity rows.
    """
    sigma = as_me_covariance(sigma, data.m)
    eqs = PropensityEquations(spec, data, sigma)
    w = data.sample_weight if weights is None else weights
    theta = eqs.closed_form(w)
    return eqs.model(theta), eqs
