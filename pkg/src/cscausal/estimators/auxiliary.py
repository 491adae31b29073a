"""Measurement-error covariance from replicates, two-phase weights and
sensitivity grids over assumed error covariances."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..core import Dataset, MeCovariance, as_me_covariance
from ..errors import CsCausalError, DataError, DegenerateStratumError, InsufficientReplicatesError
from .api import fit
from .request import EstimateResult, EstimatorRequest


def me_covariance_from_replicates(a, groups, structure: str | None = None) -> MeCovariance:
    """Pooled within-subject covariance of replicate measurements.

    ``sum_i sum_j (A*_ij - mean_i)^T (A*_ij - mean_i) / sum_i (k_i - 1)``;
    ``structure="diagonal"`` zeroes the off-diagonal entries.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    groups = np.asarray(groups)
    if groups.shape != (a.shape[0],):
        raise DataError("one replicate group label per row is required")
    if structure not in (None, "diagonal"):
        raise ValueError(f"unknown covariance structure {structure!r}; expected None or 'diagonal'")
    _, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    dof = int(np.sum(counts - 1))
    if dof == 0:
        raise InsufficientReplicatesError("no subject has two or more replicate measurements")
    sums = np.zeros((counts.size, a.shape[1]))
    np.add.at(sums, inverse, a)
    dev = a - (sums / counts[:, None])[inverse]
    s = dev.T @ dev / dof
    if structure == "diagonal":
        s = np.diag(np.diag(s))
    return as_me_covariance(0.5 * (s + s.T))


def estimate_me_covariance(data: Dataset, structure: str | None = None) -> MeCovariance:
    """Estimate Sigma_me from a dataset whose rows are replicate measurements."""
    if data.replicate_group is None:
        raise InsufficientReplicatesError("dataset carries no replicate groups")
    return me_covariance_from_replicates(data.a_star, data.replicate_group, structure)


def two_phase_weights(case, selected) -> np.ndarray:
    """Inverse selection probabilities for the selected rows.

    Selection probabilities are the sample proportions selected among cases
    and among non-cases; the result has one entry per selected row.
    """
    case = np.asarray(case).astype(bool)
    selected = np.asarray(selected).astype(bool)
    if case.shape != selected.shape:
        raise DataError("case and selection indicators must have the same length")
    w = np.empty(case.size)
    for stratum, name in ((case, "cases"), (~case, "non-cases")):
        if not stratum.any():
            continue
        p = selected[stratum].mean()
        if p == 0:
            raise DegenerateStratumError(f"no {name} were selected into the second phase")
        w[stratum] = 1.0 / p
    return w[selected]


def two_phase_sample(data: Dataset, selected) -> Dataset:
    """Restrict to second-phase rows and attach inverse selection weights."""
    if data.case_indicator is None:
        raise DataError("two-phase weights need a case indicator")
    selected = np.asarray(selected).astype(bool)
    w = two_phase_weights(data.case_indicator, selected)
    sub = data.take(np.flatnonzero(selected))
    if sub.sample_weight is not None:
        w = w * sub.sample_weight
    return replace(sub, sample_weight=w)


@dataclass(frozen=True, eq=False)
class SensitivityCell:
    sigma: MeCovariance
    scale: float | None
    result: EstimateResult | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.result is not None and self.result.converged


def sensitivity_grid(req: EstimatorRequest, data: Dataset, sigma_grid, scales=None) -> list[SensitivityCell]:
    """Refit ``req`` once per assumed Sigma_me, keeping everything else fixed.

    Failures are recorded on their cell and do not stop the grid.
    """
    sigma_grid = list(sigma_grid)
    scales = [None] * len(sigma_grid) if scales is None else list(scales)
    cells = []
    for sigma, scale in zip(sigma_grid, scales):
        sigma = as_me_covariance(sigma, data.m)
        try:
            res = fit(replace(req, sigma_me=sigma), data)
            err = None if res.converged else "did not converge"
            cells.append(SensitivityCell(sigma, scale, res, err))
        except (CsCausalError, ArithmeticError, np.linalg.LinAlgError) as exc:
            cells.append(SensitivityCell(sigma, scale, None, f"{type(exc).__name__}: {exc}"))
    return cells
