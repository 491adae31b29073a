"""Complex-capable mean-model scores, optionally weighted by stabilized weights."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..cscore import cexp, complex_link, complex_link_derivative
from ..models import Design

# theta -> [(exposure column, b1, b2[n], b3[n]), ...] with log SW = sum b1 a^2 + b2 a + b3
WeightTerms = Callable[[np.ndarray], Sequence[tuple[int, float, np.ndarray, np.ndarray]]]


def cap_modulus(sw, cap: float | None):
    """Shrink weights whose modulus exceeds ``cap`` onto the circle of radius ``cap``."""
    if cap is None:
        return sw
    mod = np.abs(sw)
    over = mod > cap
    if not np.any(over):
        return sw
    return np.where(over, sw * (cap / np.where(over, mod, 1.0)), sw)


class MeanScore:
    """``SW(L, A) {Y - mu(L, A; c)} d mu / d c`` at real or complex exposures.

    ``coef_index`` picks the mean-model coefficients out of the full
    parameter vector; ``weight_terms`` (if given) maps the same vector to the
    log stabilized-weight coefficients, so the weights may depend on fitted
    propensity parameters.
    """

    def __init__(
        self,
        design: Design,
        link: str,
        y: np.ndarray,
        l: np.ndarray,
        coef_index: np.ndarray,
        weight_terms: WeightTerms | None = None,
        weight_exposures: Sequence[int] = (),
        cap: float | None = None,
    ):
        self.design = design
        self.link = link
        self.y = np.asarray(y, dtype=float)
        self.l = np.asarray(l, dtype=float)
        self.coef_index = np.asarray(coef_index, dtype=int)
        self.weight_terms = weight_terms
        self.weight_exposures = tuple(weight_exposures)
        self.cap = cap
        self.dim = design.width

    def stabilized_weight(self, theta, powers, extra):
        expo = 0.0
        for j, b1, b2, b3 in self.weight_terms(theta):
            aj, aj2 = powers[j]
            shape = (-1,) + (1,) * extra
            expo = expo + b1 * aj2 + np.reshape(b2, shape) * aj + np.reshape(b3, shape)
        return cap_modulus(cexp(expo), self.cap)

    def bind(self, a: np.ndarray):
        a = np.asarray(a)
        extra = a.ndim - 2
        x = self.design.matrix(self.l, a)
        y = self.y.reshape((-1,) + (1,) * extra)
        powers = {j: (a[..., j], a[..., j] * a[..., j]) for j in self.weight_exposures}
        identity = self.link == "identity"

        def score(theta):
            coef = theta[self.coef_index]
            lp = x @ coef
            if identity:
                r = y - lp
            else:
                r = (y - complex_link(lp, self.link)) * complex_link_derivative(lp, self.link)
            if self.weight_terms is not None:
                r = r * self.stabilized_weight(theta, powers, extra)
            return r[..., None] * x

        return score
