"""TOML run configuration for the command-line tools.

A configuration names the input CSV and the role of each column, one
estimator request, and exactly one measurement-error covariance source::

    seed = 7

    [data]
    path = "cohort.csv"
    outcome = "Y"
    covariates = ["L1", "L2"]
    exposures = ["A"]

    [estimator]
    method = "dr"
    correction = "cs"
    grid = [0.0, 1.0]
    contrasts = [[1, 0]]

    [estimator.outcome]
    terms = [["A"], ["L1"], ["L2"], ["A", "L1"], ["A", "L2"]]

    [estimator.propensity]
    A = [["L1"], ["L2"]]

    [sigma_me]
    matrix = [[0.02]]

``[sigma_me]`` holds one of ``matrix``, ``replicates`` (a CSV of repeated
measurements with ``group`` and ``columns`` keys) or, for sensitivity runs,
``grid`` (a list of matrices), ``matrix`` plus ``scales`` (multiples of one
matrix) or ``proportions`` (diagonal variances as fractions of each observed
exposure variance).
"""

from __future__ import annotations

import csv
import hashlib
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import Dataset, MeCovariance, as_me_covariance, read_csv_dataset
from .errors import CsCausalError, DataError
from .estimators import EstimatorRequest, me_covariance_from_replicates
from .mestim import SolveOptions
from .models import DesignSpec, MeanModel, PropensitySpec


class ConfigError(CsCausalError, ValueError):
    """Malformed configuration, reported with the offending line when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = "" if path is None else f"{path}:" + ("" if line is None else f"{line}:")
        super().__init__(f"{where} {message}" if where else message)
        self.line = line


@dataclass(frozen=True, eq=False)
class RunConfig:
    path: Path
    sha256: str
    seed: int
    data: Dataset
    request: EstimatorRequest
    sigma: MeCovariance | None
    sigma_grid: tuple[MeCovariance, ...] = ()
    scales: tuple[float, ...] | None = None
    threads: int | None = None

    @property
    def manifest_line(self) -> str:
        return f"# config_sha256={self.sha256} seed={self.seed}"


class _Located:
    """Look up keys and report errors at the line where they are defined."""

    def __init__(self, path, text):
        self.path = path
        self.lines = text.splitlines()

    def line_of(self, key: str, table: str | None = None) -> int | None:
        start = 0
        if table is not None:
            hdr = re.compile(rf"^\s*\[\s*{re.escape(table)}\s*\]")
            for i, ln in enumerate(self.lines):
                if hdr.match(ln):
                    start = i
                    break
            else:
                return None
        pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
        for i in range(start, len(self.lines)):
            if pat.match(self.lines[i]):
                return i + 1
        return start + 1 if table is not None else None

    def error(self, message, key=None, table=None):
        line = None if key is None and table is None else self.line_of(key or "", table)
        return ConfigError(message, self.path, line)


def _require(loc, table: dict, key: str, name: str, kind=None):
    if key not in table:
        raise loc.error(f"missing required key {key!r}", table=name)
    value = table[key]
    if kind is not None and not isinstance(value, kind):
        raise loc.error(f"key {key!r} has the wrong type", key, name)
    return value


def _design(loc, spec: dict, name: str) -> DesignSpec:
    terms = spec.get("terms", [])
    if not isinstance(terms, list) or not all(isinstance(t, list) and t for t in terms):
        raise loc.error("terms must be a list of non-empty lists of column names", "terms", name)
    return DesignSpec(tuple(tuple(t) for t in terms), bool(spec.get("intercept", True)))


def _mean_model(loc, spec, name) -> MeanModel:
    if not isinstance(spec, dict):
        raise loc.error(f"[{name}] must be a table", table=name)
    return MeanModel(_design(loc, spec, name), spec.get("link", "identity"))


def _propensity(loc, spec, name) -> PropensitySpec:
    if not isinstance(spec, dict) or not spec:
        raise loc.error(f"[{name}] must map each exposure to a list of covariate terms", table=name)
    out = []
    for exposure, terms in spec.items():
        out.append((exposure, _design(loc, {"terms": terms}, name)))
    return PropensitySpec(tuple(out))


def _matrix(loc, value, key, table, m):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise loc.error(f"{key} must be a numeric matrix", key, table) from None
    if arr.ndim == 0 and m == 1:
        arr = arr.reshape(1, 1)
    if arr.shape != (m, m):
        raise loc.error(f"{key} must be a {m}x{m} matrix, got shape {arr.shape}", key, table)
    try:
        return as_me_covariance(arr, m)
    except CsCausalError as exc:
        raise loc.error(f"{key}: {exc}", key, table) from None


def _read_columns(path: Path, names):
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        rows = list(reader)
        header = reader.fieldnames or []
    missing = [c for c in names if c not in header]
    if missing:
        raise DataError(f"{path}: column {missing[0]!r} not found (available: {', '.join(header)})")
    try:
        return [np.array([float(r[c]) for r in rows]) for c in names]
    except (TypeError, ValueError):
        raise DataError(f"{path}: non-numeric value in columns {', '.join(names)}") from None


def _sigma(loc, spec, base: Path, data: Dataset):
    if spec is None:
        return None, (), None
    if not isinstance(spec, dict):
        raise loc.error("[sigma_me] must be a table", table="sigma_me")
    given = [k for k in ("replicates", "grid", "proportions") if k in spec]
    if "matrix" in spec:
        given.append("scales" if "scales" in spec else "matrix")
    if len(given) != 1:
        raise loc.error("[sigma_me] needs exactly one of matrix, replicates, grid, proportions or matrix with scales",
                        table="sigma_me")
    m = data.m
    kind = given[0]
    if kind == "matrix":
        return _matrix(loc, spec["matrix"], "matrix", "sigma_me", m), (), None
    if kind == "replicates":
        path = base / str(spec["replicates"])
        group = _require(loc, spec, "group", "sigma_me", str)
        cols = spec.get("columns", list(data.exposure_names))
        if len(cols) != m:
            raise loc.error(f"columns must list {m} exposure column(s)", "columns", "sigma_me")
        g, *a = _read_columns(path, [group, *cols])
        return me_covariance_from_replicates(np.column_stack(a), g, spec.get("structure")), (), None
    if kind == "proportions":
        # diagonal error variances as fractions of the observed exposure variances
        var = np.var(data.a_star, axis=0, ddof=1)
        scales = tuple(float(s) for s in spec["proportions"])
        grid = tuple(as_me_covariance(np.diag(s * var), m) for s in scales)
    elif "scales" in spec:
        base_sigma = _matrix(loc, spec["matrix"], "matrix", "sigma_me", m)
        scales = tuple(float(s) for s in spec["scales"])
        grid = tuple(base_sigma.scaled(s) for s in scales)
    else:
        if not isinstance(spec["grid"], list):
            raise loc.error("grid must be a list of matrices", "grid", "sigma_me")
        grid = tuple(_matrix(loc, g, "grid", "sigma_me", m) for g in spec["grid"])
        scales = tuple(float(np.trace(g.sigma) / m) for g in grid)
    if not grid:
        raise loc.error("the sigma_me grid is empty", kind, "sigma_me")
    return None, grid, scales


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration; errors name the line at fault."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", path) from None
    text = raw.decode("utf-8")
    try:
        cfg = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(str(exc), path, int(m.group(1)) if m else None) from None
    loc = _Located(path, text)
    base = path.parent

    if "seed" not in cfg:
        raise ConfigError("missing required key 'seed'", path, 1)
    seed = cfg["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise loc.error("seed must be a non-negative integer", "seed")

    data_tab = cfg.get("data")
    if not isinstance(data_tab, dict):
        raise ConfigError("missing [data] table", path, 1)
    for key in ("path", "outcome", "exposures"):
        if key not in data_tab:
            raise loc.error(f"[data] is missing required key {key!r}", table="data")
    roles = {k: v for k, v in data_tab.items() if k != "path"}
    data = read_csv_dataset(base / str(data_tab["path"]), roles)

    est = cfg.get("estimator")
    if not isinstance(est, dict):
        raise ConfigError("missing [estimator] table", path, 1)
    if "method" not in est:
        raise loc.error("[estimator] is missing required key 'method'", table="estimator")
    sigma, grid, scales = _sigma(loc, cfg.get("sigma_me"), base, data)

    kw = {}
    for key in ("correction", "draws", "antithetic", "weight_cap_quantile", "simex_draws"):
        if key in est:
            kw[key] = est[key]
    if "simex_lambdas" in est:
        kw["simex_lambdas"] = tuple(float(v) for v in est["simex_lambdas"])
    if "grid" in est:
        kw["grid"] = np.asarray(est["grid"], dtype=float)
    if "contrasts" in est:
        kw["contrasts"] = tuple(tuple(c) for c in est["contrasts"])
    if "outcome" in est:
        kw["outcome"] = _mean_model(loc, est["outcome"], "estimator.outcome")
    if "msm" in est:
        kw["msm"] = _mean_model(loc, est["msm"], "estimator.msm")
    if "propensity" in est:
        kw["propensity"] = _propensity(loc, est["propensity"], "estimator.propensity")
    if "solve" in est:
        kw["solve_options"] = SolveOptions(**est["solve"])
    try:
        req = EstimatorRequest(
            est["method"], sigma_me=sigma, seed=seed, simex_seed=seed + 1,
            alpha=float(cfg.get("alpha", 0.05)), **kw,
        )
    except (CsCausalError, TypeError) as exc:
        raise loc.error(str(exc), table="estimator") from None
    _check_columns(loc, req, data)

    threads = cfg.get("threads")
    return RunConfig(path, hashlib.sha256(raw).hexdigest(), seed, data, req, sigma, grid, scales, threads)


def _check_columns(loc, req: EstimatorRequest, data: Dataset):
    known = set(data.covariate_names) | set(data.exposure_names)
    for name, model in (("estimator.outcome", req.outcome), ("estimator.msm", req.msm)):
        if model is None:
            continue
        for t in model.design.terms:
            for f in t:
                if f not in known:
                    raise loc.error(f"term references column {f!r}, which is not a declared covariate or exposure",
                                    "terms", name)
    if isinstance(req.propensity, PropensitySpec):
        for exposure, d in req.propensity.conditional:
            if exposure not in data.exposure_names:
                raise loc.error(f"propensity model for unknown exposure {exposure!r}", exposure, "estimator.propensity")
            for t in d.terms:
                for f in t:
                    if f not in data.covariate_names:
                        raise loc.error(f"propensity term references column {f!r}, which is not a declared covariate",
                                        exposure, "estimator.propensity")
    if req.grid is not None and req.grid.shape[1] != data.m:
        raise loc.error(f"grid points need {data.m} coordinate(s)", "grid", "estimator")
