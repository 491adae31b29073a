"""Monte-Carlo corrected scores via complex-valued exposure perturbation.

A score ``psi0(Y, L, A; theta)`` that is conditionally unbiased given the true
exposure ``A`` is corrected for additive normal measurement error by
averaging ``Re psi0(Y, L, A* + i e)`` over draws ``e ~ N(0, Sigma_me)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .core import MeCovariance, as_me_covariance
from .errors import DimensionError, DivergentCorrectionError, NumericDomainError
from .mestim import Block, EstimatingFunction

EXP_LIMIT = 700.0
LINKS = ("identity", "log", "logit")


def _check_exponent(z, what="exponential"):
    re = np.real(np.asarray(z))
    if re.size and np.max(np.abs(re)) > EXP_LIMIT:
        raise NumericDomainError(f"{what} argument with |Re| > {EXP_LIMIT:g}")


def cexp(z):
    """``exp`` for real or complex input with the overflow guard.

    Complex input goes through Euler's formula so that a zero imaginary part
    reproduces the real exponential exactly.
    """
    _check_exponent(z)
    if np.iscomplexobj(z):
        return np.exp(np.real(z)) * (np.cos(np.imag(z)) + 1j * np.sin(np.imag(z)))
    return np.exp(z)


def complex_link(z, link: str):
    """Inverse link ``g^{-1}(z)`` for real or complex linear predictors."""
    if link == "identity":
        return z
    if link == "log":
        return cexp(z)
    if link == "logit":
        return 1.0 / (1.0 + cexp(-z))
    raise ValueError(f"unknown link {link!r}; expected one of {LINKS}")


def complex_link_derivative(z, link: str):
    """Derivative of the inverse link evaluated at ``z``."""
    if link == "identity":
        return np.ones_like(z)
    if link == "log":
        return cexp(z)
    if link == "logit":
        e = cexp(-z)
        return e / (1.0 + e) ** 2
    raise ValueError(f"unknown link {link!r}; expected one of {LINKS}")


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PerturbationBank:
    """Frozen imaginary-error draws, ``eps[i, b] ~ N(0, Sigma_me)``."""

    eps: np.ndarray
    seed: int
    sigma: MeCovariance

    @property
    def n(self) -> int:
        return self.eps.shape[0]

    @property
    def draws(self) -> int:
        return self.eps.shape[1]

    @property
    def is_zero(self) -> bool:
        return self.sigma.is_zero

    def take(self, index) -> "PerturbationBank":
        eps = self.eps[np.asarray(index)]
        eps.flags.writeable = False
        return PerturbationBank(eps, self.seed, self.sigma)


def standard_normal_block(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals from a counter-based stream.

    Entry ``k`` (in C order) is a Box-Muller transform of the ``2k``-th and
    ``2k+1``-th doubles of a Philox stream keyed by ``seed``; a draw depends
    only on its position, never on how many draws precede it in other calls.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    u = rng.random(shape + (2,))
    return np.sqrt(-2.0 * np.log1p(-u[..., 0])) * np.cos(2.0 * np.pi * u[..., 1])


def draw_perturbations(n: int, draws: int, sigma, seed: int, antithetic: bool = False) -> PerturbationBank:
    """Draw the ``(n, draws, m)`` bank of imaginary measurement errors.

    With ``antithetic=True`` the second half of the draws is the negation of
    the first half (``draws`` must be even).
    """
    if n < 1 or draws < 1:
        raise ValueError("n and draws must be at least 1")
    sigma = as_me_covariance(sigma)
    m, r = sigma.m, sigma.rank
    if r == 0:
        eps = np.zeros((n, draws, m))
    else:
        base = draws // 2 if antithetic else draws
        if antithetic and draws % 2:
            raise ValueError("antithetic pairing needs an even number of draws")
        u = standard_normal_block(seed, (n, base, r))
        eps = u @ sigma.rank_factor.T
        if antithetic:
            eps = np.concatenate([eps, -eps], axis=1)
        eps[..., sigma.error_free] = 0.0
    eps.flags.writeable = False
    return PerturbationBank(eps, int(seed), sigma)


# ---------------------------------------------------------------------------
# MCCS transform
# ---------------------------------------------------------------------------


class ComplexScore(Protocol):
    """A score that can be evaluated at real or complex exposures.

    ``bind(a)`` receives exposures of shape ``(n, m)`` or ``(n, B, m)`` and
    returns ``f(theta) -> (n, q)`` or ``(n, B, q)``; anything that depends
    only on ``a`` should be computed once inside ``bind``.
    """

    dim: int

    def bind(self, a: np.ndarray) -> Callable[[np.ndarray], np.ndarray]: ...


def complex_exposures(a_star: np.ndarray, bank: PerturbationBank) -> np.ndarray:
    return a_star[:, None, :] + 1j * bank.eps


def mccs_function(psi0: ComplexScore, a_star, bank: PerturbationBank | None):
    """``theta -> (n, q)`` corrected score; the naive score when no error."""
    a_star = np.asarray(a_star, dtype=float)
    if bank is None or bank.is_zero:
        bound = psi0.bind(a_star)
        return lambda theta: np.asarray(bound(theta))
    if bank.n != a_star.shape[0] or bank.eps.shape[2] != a_star.shape[1]:
        raise DimensionError(f"perturbation bank shape {bank.eps.shape} does not match exposures {a_star.shape}")
    bound = psi0.bind(complex_exposures(a_star, bank))
    draws = bank.draws

    def corrected(theta):
        vals = bound(theta)
        return np.real(vals).sum(axis=1) / draws

    return corrected


def mccs_block(name: str, psi0: ComplexScore, a_star, bank, depends=None) -> Block:
    return Block(name, psi0.dim, mccs_function(psi0, a_star, bank), depends)


def mccs_transform(psi0: ComplexScore, a_star, bank: PerturbationBank | None, weights=None) -> EstimatingFunction:
    """Monte-Carlo corrected version of ``psi0`` as an estimating function."""
    a_star = np.asarray(a_star, dtype=float)
    return EstimatingFunction([mccs_block("mccs", psi0, a_star, bank)], psi0.dim, a_star.shape[0], weights)


# ---------------------------------------------------------------------------
# Closed form for normal propensities and a linear MSM (univariate exposure)
# ---------------------------------------------------------------------------


def closed_form_cs_ipw(y, mu_l, a_star, sigma2_me, delta2, mu, tau2, gamma):
    """Exact corrected IPW score for one exposure.

    Propensities are ``A | L ~ N(mu_l, delta2)`` and ``A ~ N(mu, tau2)``; the
    MSM is ``gamma0 + gamma1 * a``.  Writing the weighted score at
    ``A* + i e`` as ``exp(c1 + c2 e^2 + i c3 e)`` times a quadratic in ``e``,
    the expectation over ``e ~ N(0, sigma2_me)`` follows from the normal
    characteristic function.  Returns shape ``(..., 2)``.
    """
    y, mu_l, a = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y, mu_l, a_star)))
    s2 = float(sigma2_me)
    g0, g1 = (float(v) for v in gamma)
    b1 = 0.5 * (1.0 / delta2 - 1.0 / tau2)
    b2 = mu / tau2 - mu_l / delta2
    b3 = 0.5 * (mu_l**2 / delta2 - mu**2 / tau2)
    c1 = b1 * a**2 + b2 * a + b3
    c2 = -b1
    c3 = 2.0 * b1 * a + b2
    d1 = y - g0 - g1 * a
    d2 = g1
    d3 = (y - g0) * a - g1 * a**2
    d4 = g1
    d5 = y - g0 - 2.0 * g1 * a

    shrink = 1.0 - 2.0 * s2 * c2
    if shrink <= 0:
        raise DivergentCorrectionError(
            f"1 - 2*sigma2_me*c2 = {shrink:.4g} <= 0: the correction integral does not exist"
        )
    t = s2 / shrink  # 1 / (sigma_me^-2 - 2 c2)
    lead = np.sqrt(delta2 / tau2) * shrink**-0.5 * cexp(c1 - 0.5 * c3**2 * t)
    first = d1 + d2 * c3 * t
    second = d3 - d5 * c3 * t + d4 * t * (1.0 - c3**2 * t)
    return np.stack([lead * first, lead * second], axis=-1)
