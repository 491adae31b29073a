"""Estimator requests and their results."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import FitResult, MeCovariance
from ..errors import SpecificationError
from ..mestim import SolveOptions, wald_ci
from ..models import MeanModel, PropensityModel, PropensitySpec

METHODS = ("gformula", "ipw", "dr")
CORRECTIONS = ("oracle", "naive", "cs", "rc", "simex")
DEFAULT_GRID_POINTS = 41


def dose_grid(start: float, stop: float, num: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """Evenly spaced single-exposure grid as a ``(num, 1)`` array."""
    return np.linspace(start, stop, num)[:, None]


def point_label(point) -> str:
    return "eta(" + ",".join(f"{v:g}" for v in np.atleast_1d(point)) + ")"


@dataclass(frozen=True)
class EstimatorRequest:
    """Everything needed to run one estimator on one dataset.

    ``propensity`` is either a spec to be fitted, a known
    :class:`PropensityModel` (its rows are then left out of the stack), or
    ``None`` for IPW with unit weights.
    """

    method: str
    correction: str = "cs"
    outcome: MeanModel | None = None
    msm: MeanModel | None = None
    propensity: PropensitySpec | PropensityModel | None = None
    sigma_me: MeCovariance | np.ndarray | None = None
    draws: int = 32
    antithetic: bool = False
    seed: int = 0
    grid: np.ndarray | None = None
    contrasts: tuple[tuple[int, int], ...] = ()
    alpha: float = 0.05
    weight_cap_quantile: float | None = None
    simex_lambdas: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    simex_draws: int = 100
    simex_seed: int = 1
    solve_options: SolveOptions = field(default_factory=SolveOptions)

    def __post_init__(self):
        if self.method not in METHODS:
            raise SpecificationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.correction not in CORRECTIONS:
            raise SpecificationError(f"unknown correction {self.correction!r}; expected one of {CORRECTIONS}")
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=float)
            if g.ndim == 1:
                g = g[:, None]
            object.__setattr__(self, "grid", g)
        object.__setattr__(self, "contrasts", tuple((int(i), int(j)) for i, j in self.contrasts))
        if self.draws < 1:
            raise SpecificationError("draws must be at least 1")
        self.validate()

    def validate(self) -> None:
        if self.method in ("gformula", "dr") and self.outcome is None:
            raise SpecificationError(f"{self.method} requires an outcome model")
        if self.method == "ipw" and self.msm is None:
            raise SpecificationError("ipw requires a marginal structural model")
        if self.method == "dr" and self.propensity is None:
            raise SpecificationError("dr requires a propensity model (fitted spec or known weights)")
        if self.method == "gformula" and self.propensity is not None:
            raise SpecificationError("gformula takes no propensity model")
        if self.method == "dr":
            if self.msm is not None and self.msm.link != self.outcome.link:
                raise SpecificationError("dr requires the outcome model and the MSM to share a link")
            if self.outcome.link not in ("identity", "log"):
                raise SpecificationError("dr supports the identity link, or the log link without exposure-covariate interactions")
        if self.method in ("gformula", "dr") and self.grid is None:
            raise SpecificationError(f"{self.method} requires a dose grid")
        if self.grid is not None:
            for i, j in self.contrasts:
                if not (0 <= i < len(self.grid) and 0 <= j < len(self.grid)):
                    raise SpecificationError(f"contrast ({i}, {j}) refers to a grid point that does not exist")


@dataclass(frozen=True)
class Estimate:
    name: str
    estimate: float
    se_uc: float
    se_bc: float

    def ci(self, alpha: float = 0.05, kind: str = "uc") -> tuple[float, float]:
        se = self.se_uc if kind == "uc" else self.se_bc
        if not np.isfinite(se):
            return (np.nan, np.nan)
        return wald_ci(self.estimate, se, alpha)


@dataclass(frozen=True, eq=False)
class DoseResponse:
    grid: np.ndarray
    estimates: np.ndarray
    se_uc: np.ndarray
    se_bc: np.ndarray
    alpha: float = 0.05

    def __post_init__(self):
        k = len(self.grid)
        if not (len(self.estimates) == len(self.se_uc) == len(self.se_bc) == k):
            raise ValueError("dose-response arrays must share the grid length")

    def ci(self, kind: str = "uc") -> np.ndarray:
        se = self.se_uc if kind == "uc" else self.se_bc
        return np.array([wald_ci(e, s, self.alpha) if np.isfinite(s) else (np.nan, np.nan) for e, s in zip(self.estimates, se)])

    def rows(self) -> list[Estimate]:
        return [Estimate(point_label(a), float(e), float(u), float(b)) for a, e, u, b in zip(self.grid, self.estimates, self.se_uc, self.se_bc)]


@dataclass(frozen=True, eq=False)
class EstimateResult:
    request: EstimatorRequest
    fit: FitResult
    dose_response: DoseResponse | None
    contrasts: tuple[Estimate, ...] = ()
    point_only: bool = False

    @property
    def converged(self) -> bool:
        return self.fit.converged

    def parameters(self) -> list[Estimate]:
        th = self.fit.theta_hat
        se_uc, se_bc = self.fit.se("uc"), self.fit.se("bc")
        return [Estimate(lab, float(v), float(u), float(b)) for lab, v, u, b in zip(th.labels, th.values, se_uc, se_bc)]

    def all_estimates(self) -> list[Estimate]:
        out = self.parameters()
        seen = {e.name for e in out}
        if self.dose_response is not None:
            out += [e for e in self.dose_response.rows() if e.name not in seen]
        out += list(self.contrasts)
        return out

    def get(self, name: str) -> Estimate:
        for e in self.all_estimates():
            if e.name == name:
                return e
        raise KeyError(f"no estimate named {name!r}")


def contrast_label(grid: np.ndarray, i: int, j: int) -> str:
    return f"{point_label(grid[i])}-{point_label(grid[j])}"
