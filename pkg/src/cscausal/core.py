"""Immutable data containers and the measurement-error covariance factor."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, DimensionError, NotPSDError


def _frozen(x, dtype=float, ndim=None, name="array"):
    if x is None:
        return None
    arr = np.array(x, dtype=dtype, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr[:, None]
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome, covariates and measured exposures for ``n`` units.

    ``a_true`` is only populated by the simulation generators; it holds the
    error-free exposures used by oracle fits and is never read otherwise.
    """

    y: np.ndarray
    l: np.ndarray
    a_star: np.ndarray
    sample_weight: np.ndarray | None = None
    case_indicator: np.ndarray | None = None
    replicate_group: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    exposure_names: tuple[str, ...] = ()
    a_true: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        y = _frozen(self.y, ndim=1, name="y")
        n = y.shape[0]
        l = self.l if self.l is not None else np.empty((n, 0))
        l = _frozen(l, ndim=2, name="l")
        a = _frozen(self.a_star, ndim=2, name="a_star")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "a_star", a)
        for name, arr in (("l", l), ("a_star", a)):
            if arr.shape[0] != n:
                raise DimensionError(f"{name} has {arr.shape[0]} rows, expected {n}")
        for name, arr in (("y", y), ("l", l), ("a_star", a)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"missing or non-finite values in {name}")

        if self.sample_weight is not None:
            w = _frozen(self.sample_weight, ndim=1, name="sample_weight")
            if w.shape[0] != n:
                raise DimensionError("sample_weight length differs from n")
            if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
                raise DataError("sample_weight must be finite, nonnegative, with at least one positive entry")
            object.__setattr__(self, "sample_weight", w)
        if self.case_indicator is not None:
            c = _frozen(self.case_indicator, ndim=1, name="case_indicator")
            if c.shape[0] != n or not np.all(np.isin(c, (0.0, 1.0))):
                raise DataError("case_indicator must be a binary vector of length n")
            object.__setattr__(self, "case_indicator", c)
        if self.replicate_group is not None:
            g = _frozen(self.replicate_group, dtype=np.int64, ndim=1, name="replicate_group")
            if g.shape[0] != n:
                raise DimensionError("replicate_group length differs from n")
            object.__setattr__(self, "replicate_group", g)
        if self.a_true is not None:
            t = _frozen(self.a_true, ndim=2, name="a_true")
            if t.shape != a.shape:
                raise DimensionError("a_true must match a_star in shape")
            object.__setattr__(self, "a_true", t)

        cov_names = tuple(self.covariate_names) or tuple(f"L{j + 1}" for j in range(l.shape[1]))
        exp_names = tuple(self.exposure_names) or tuple(f"A{j + 1}" for j in range(a.shape[1]))
        if len(cov_names) != l.shape[1] or len(exp_names) != a.shape[1]:
            raise DimensionError("column names do not match data dimensions")
        if len(set(cov_names + exp_names)) != len(cov_names) + len(exp_names):
            raise DataError("covariate and exposure names must be unique")
        object.__setattr__(self, "covariate_names", cov_names)
        object.__setattr__(self, "exposure_names", exp_names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.l.shape[1]

    @property
    def m(self) -> int:
        return self.a_star.shape[1]

    @property
    def weights(self) -> np.ndarray:
        if self.sample_weight is None:
            return np.ones(self.n)
        return self.sample_weight

    def with_exposures(self, a: np.ndarray) -> "Dataset":
        return replace(self, a_star=a)

    def oracle(self) -> "Dataset":
        """Copy whose measured exposures are the hidden true exposures."""
        if self.a_true is None:
            raise DataError("oracle fit requested but the dataset carries no true exposures")
        return replace(self, a_star=self.a_true)

    def take(self, index) -> "Dataset":
        index = np.asarray(index)

        def sub(x):
            return None if x is None else x[index]

        return replace(
            self,
            y=self.y[index],
            l=self.l[index],
            a_star=self.a_star[index],
            sample_weight=sub(self.sample_weight),
            case_indicator=sub(self.case_indicator),
            replicate_group=sub(self.replicate_group),
            a_true=sub(self.a_true),
        )


@dataclass(frozen=True, eq=False)
class MeCovariance:
    """Measurement-error covariance with a rank factor ``F`` (``F @ F.T == sigma``)."""

    sigma: np.ndarray
    rank_factor: np.ndarray

    @property
    def m(self) -> int:
        return self.sigma.shape[0]

    @property
    def rank(self) -> int:
        return self.rank_factor.shape[1]

    @property
    def error_free(self) -> np.ndarray:
        return np.all(self.sigma == 0.0, axis=1)

    @property
    def is_zero(self) -> bool:
        return self.rank == 0

    def scaled(self, c: float) -> "MeCovariance":
        return factor_me_covariance(self.sigma * c)


def factor_me_covariance(sigma) -> MeCovariance:
    """Validate a measurement-error covariance and compute a rank factor.

    Rows and columns that are identically zero (error-free exposures) get
    exactly-zero rows in the factor.  Slightly negative eigenvalues, down to
    ``-1e-10`` times the largest, are clipped to zero.
    """
    s = np.atleast_2d(np.asarray(sigma, dtype=float))
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"measurement-error covariance must be square, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise DimensionError("measurement-error covariance has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(s))) if s.size else 1.0)
    if np.max(np.abs(s - s.T), initial=0.0) > 1e-12 * scale:
        raise DimensionError("measurement-error covariance is not symmetric")
    s = 0.5 * (s + s.T)
    m = s.shape[0]

    active = ~np.all(s == 0.0, axis=1)
    sub = s[np.ix_(active, active)]
    factor = np.zeros((m, 0))
    if sub.size:
        evals, evecs = np.linalg.eigh(sub)
        top = max(float(evals[-1]), 0.0)
        if evals[0] < -1e-10 * top:
            raise NotPSDError(f"measurement-error covariance has eigenvalue {evals[0]:.3g} < 0")
        if evals[0] > 1e-10 * top:
            f_sub = np.linalg.cholesky(sub)
        else:
            keep = evals > 1e-10 * top
            f_sub = evecs[:, keep] * np.sqrt(evals[keep])
        factor = np.zeros((m, f_sub.shape[1]))
        factor[active] = f_sub
    sig = factor @ factor.T if factor.shape[1] else np.zeros((m, m))
    # keep the user's matrix where the reconstruction already agrees
    if np.max(np.abs(sig - s), initial=0.0) <= 1e-10 * scale:
        sig = s
    sig = np.array(sig)
    sig.flags.writeable = False
    factor.flags.writeable = False
    return MeCovariance(sigma=sig, rank_factor=factor)


def as_me_covariance(sigma, m: int | None = None) -> MeCovariance:
    if isinstance(sigma, MeCovariance):
        out = sigma
    elif sigma is None:
        if m is None:
            raise DimensionError("dimension required for a zero covariance")
        out = factor_me_covariance(np.zeros((m, m)))
    else:
        arr = np.asarray(sigma, dtype=float)
        if arr.ndim == 1:
            arr = np.diag(arr)
        out = factor_me_covariance(arr)
    if m is not None and out.m != m:
        raise DimensionError(f"measurement-error covariance is {out.m}x{out.m}, data have {m} exposures")
    return out


@dataclass(frozen=True)
class ParameterVector:
    """Flat parameter values with named, contiguous blocks and per-entry labels."""

    values: np.ndarray
    blocks: Mapping[str, slice]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        covered = np.zeros(v.size, dtype=int)
        for sl in self.blocks.values():
            covered[sl] += 1
        if v.size and not np.all(covered == 1):
            raise DimensionError("parameter blocks must partition the index range")
        labels = tuple(self.labels) or tuple(f"theta[{k}]" for k in range(v.size))
        if len(labels) != v.size:
            raise DimensionError("one label per parameter required")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "blocks", dict(self.blocks))

    def __len__(self):
        return self.values.size

    def block(self, name: str) -> np.ndarray:
        return self.values[self.blocks[name]]

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.blocks, self.labels)

    @classmethod
    def from_blocks(cls, parts: Sequence[tuple[str, np.ndarray, Sequence[str]]]) -> "ParameterVector":
        values, blocks, labels, start = [], {}, [], 0
        for name, vals, labs in parts:
            vals = np.atleast_1d(np.asarray(vals, dtype=float))
            if name in blocks:
                raise DimensionError(f"duplicate block name {name!r}")
            blocks[name] = slice(start, start + vals.size)
            start += vals.size
            values.append(vals)
            labels.extend(labs)
        return cls(np.concatenate(values) if values else np.empty(0), blocks, tuple(labels))


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: ParameterVector
    vcov_uc: np.ndarray
    vcov_bc: np.ndarray
    converged: bool
    iterations: int
    max_residual: float

    def se(self, kind: str = "uc") -> np.ndarray:
        v = self.vcov_uc if kind == "uc" else self.vcov_bc
        return np.sqrt(np.clip(np.diag(v), 0.0, None))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

ROLE_KEYS = ("outcome", "covariates", "exposures", "sample_weight", "case", "replicate_group")


def read_csv_dataset(path, roles: Mapping[str, object]) -> Dataset:
    """Load a dataset from a headed CSV file given a column-role map.

    ``roles`` has keys ``outcome`` (str), ``covariates`` and ``exposures``
    (lists of str) and optionally ``sample_weight``, ``case`` and
    ``replicate_group``.  Numbers are parsed with ``float`` so the decimal
    separator is always a period.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    col = {name: j for j, name in enumerate(header)}

    def column(name: str) -> np.ndarray:
        if name not in col:
            raise DataError(f"{path}: column {name!r} not found (available: {', '.join(header)})")
        j = col[name]
        out = np.empty(len(body))
        for i, r in enumerate(body):
            try:
                out[i] = float(r[j])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{i + 2}: column {name!r} has non-numeric or missing value") from None
        return out

    if "outcome" not in roles or "exposures" not in roles:
        raise DataError("column roles must name an outcome and at least one exposure")
    outcome = str(roles["outcome"])
    covs = [str(c) for c in roles.get("covariates", [])]
    exps = [str(c) for c in roles["exposures"]]
    if not exps:
        raise DataError("at least one exposure column is required")
    n = len(body)
    opt = {}
    for key, target in (("sample_weight", "sample_weight"), ("case", "case_indicator"), ("replicate_group", "replicate_group")):
        if roles.get(key):
            opt[target] = column(str(roles[key]))
    return Dataset(
        y=column(outcome),
        l=np.column_stack([column(c) for c in covs]) if covs else np.empty((n, 0)),
        a_star=np.column_stack([column(c) for c in exps]),
        covariate_names=tuple(covs),
        exposure_names=tuple(exps),
        **opt,
    )


def write_csv_dataset(path, data: Dataset, outcome_name: str = "Y") -> None:
    header = [outcome_name, *data.covariate_names, *data.exposure_names]
    cols = [data.y, *data.l.T, *data.a_star.T]
    if data.sample_weight is not None:
        header.append("w")
        cols.append(data.sample_weight)
    if data.case_indicator is not None:
        header.append("case")
        cols.append(data.case_indicator)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])
