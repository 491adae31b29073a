"""Small complex-capable scores shared by the tests."""

import numpy as np

from cscausal.cscore import cexp


class LinearIpwScore:
    """Known-weight IPW score SW(L, a) (Y - g0 - g1 a) (1, a) for one exposure."""

    dim = 2

    def __init__(self, y, mu_l, delta2, mu, tau2):
        self.y = np.asarray(y, dtype=float)
        self.mu_l = np.asarray(mu_l, dtype=float)
        self.delta2, self.mu, self.tau2 = delta2, mu, tau2

    def weight(self, a):
        b1 = 0.5 * (1 / self.delta2 - 1 / self.tau2)
        extra = (1,) * (a.ndim - 1)
        mu_l = self.mu_l.reshape((-1,) + extra)
        b2 = self.mu / self.tau2 - mu_l / self.delta2
        b3 = 0.5 * (mu_l**2 / self.delta2 - self.mu**2 / self.tau2)
        return np.sqrt(self.delta2 / self.tau2) * cexp(b1 * a**2 + b2 * a + b3)

    def bind(self, a):
        a = np.asarray(a)[..., 0]
        y = self.y.reshape((-1,) + (1,) * (a.ndim - 1))
        sw = self.weight(a)

        def score(theta):
            r = sw * (y - theta[0] - theta[1] * a)
            return np.stack([r, r * a], axis=-1)

        return score


class PolyOutcomeScore:
    """Identity-link score (Y - x'b) x with x = (1, A, A^2, A^3, L)."""

    dim = 5

    def __init__(self, y, l):
        self.y = np.asarray(y, dtype=float)
        self.l = np.asarray(l, dtype=float)

    def bind(self, a):
        a = np.asarray(a)[..., 0]
        extra = (1,) * (a.ndim - 1)
        l = self.l.reshape((-1,) + extra) + 0 * a
        x = np.stack([np.ones_like(a), a, a * a, a * a * a, l], axis=-1)
        y = self.y.reshape((-1,) + extra)

        def score(theta):
            return (y - x @ theta)[..., None] * x

        return score
