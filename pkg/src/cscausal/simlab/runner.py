"""Replicate runner and metric aggregation for the simulation designs."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from ..errors import CsCausalError, SpecificationError
from ..estimators import EstimatorRequest, fit
from ..models import DesignSpec, MeanModel, PropensitySpec
from .generators import GENERATORS, generate

FAILURE_WARNING = 0.05


@dataclass(frozen=True)
class Target:
    parameter: str  # label in the metrics table
    estimate: str  # name in the fitted result
    truth: float


@dataclass(frozen=True, eq=False)
class MethodSpec:
    """One row group of a study: an estimator request and what to score."""

    method: str
    request: EstimatorRequest
    targets: tuple[Target, ...]
    cell: str = ""
    curve_truth: tuple[float, ...] | None = None


@dataclass(frozen=True, eq=False)
class StudyDesign:
    generator: str
    n: int
    R: int
    seed: int
    methods: tuple[MethodSpec, ...]
    params: dict = field(default_factory=dict)
    alpha: float = 0.05

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise SpecificationError(f"unknown design {self.generator!r}; available: {', '.join(GENERATORS)}")
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not self.methods:
            raise SpecificationError("a study needs at least one method")


@dataclass(frozen=True)
class ReplicateRecord:
    replicate: int
    method: str
    cell: str
    parameter: str
    estimate: float
    se_uc: float
    se_bc: float
    status: str


@dataclass(frozen=True)
class MetricsRow:
    cell: str
    method: str
    parameter: str
    truth: float
    n_ok: int
    failures: int
    bias: float
    ese: float
    ase_uc: float
    cov_uc: float
    ase_bc: float
    cov_bc: float

    @property
    def warning(self) -> bool:
        total = self.n_ok + self.failures
        return total > 0 and self.failures / total > FAILURE_WARNING


@dataclass(frozen=True, eq=False)
class MetricsTable:
    design: str
    n: int
    R: int
    seed: int
    rows: tuple[MetricsRow, ...]
    records: tuple[ReplicateRecord, ...]
    curves: tuple[tuple[float, str, str, float], ...] = ()

    @property
    def warning(self) -> bool:
        return any(r.warning for r in self.rows)

    def get(self, method: str, parameter: str, cell: str = "") -> MetricsRow:
        for r in self.rows:
            if r.method == method and r.parameter == parameter and r.cell == cell:
                return r
        raise KeyError((method, parameter, cell))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["design", "n", "R", "cell", "method", "parameter", "truth", "n_ok", "failures",
                    "bias", "ese", "ase_uc", "cov_uc", "ase_bc", "cov_bc", "warning"])
        for r in self.rows:
            w.writerow([self.design, self.n, self.R, r.cell, r.method, r.parameter, _fmt(r.truth), r.n_ok,
                        r.failures, _fmt(r.bias), _fmt(r.ese), _fmt(r.ase_uc), _fmt(r.cov_uc), _fmt(r.ase_bc),
                        _fmt(r.cov_bc), "WARNING: >5% failures" if r.warning else ""])
        return buf.getvalue()

    def audit_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate", "cell", "method", "parameter", "estimate", "se_uc", "se_bc", "status"])
        for r in self.records:
            w.writerow([r.replicate, r.cell, r.method, r.parameter, _fmt(r.estimate, 12), _fmt(r.se_uc, 12),
                        _fmt(r.se_bc, 12), r.status])
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a", "cell", "method", "bias"])
        for a, cell, method, bias in self.curves:
            w.writerow([_fmt(a), cell, method, _fmt(bias, 8)])
        return buf.getvalue()


def _fmt(x, digits=4):
    x = float(x)
    if not np.isfinite(x):
        return "NA"
    return f"{x:.{digits}f}"


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def replicate_seeds(seed: int, rep: int):
    """Independent data and fit streams for replicate ``rep``."""
    data_ss, fit_ss = np.random.SeedSequence([seed, rep]).spawn(2)
    bank_seed, simex_seed = (int(v) for v in fit_ss.generate_state(2))
    return np.random.default_rng(data_ss), bank_seed, simex_seed


def _run_replicate(design: StudyDesign, rep: int):
    rng, bank_seed, simex_seed = replicate_seeds(design.seed, rep)
    sim = generate(design.generator, design.n, rng, design.params)
    records, curves = [], []
    cache = {}
    for spec in design.methods:
        key = id(spec.request)
        if key not in cache:
            req = replace(spec.request, sigma_me=sim.sigma_me, seed=bank_seed, simex_seed=simex_seed)
            try:
                res = fit(req, sim.data)
                cache[key] = (res, "ok" if res.converged else "nonconverged")
            except (CsCausalError, ArithmeticError, np.linalg.LinAlgError) as exc:
                cache[key] = (None, f"error: {type(exc).__name__}")
        res, status = cache[key]
        for t in spec.targets:
            if res is None:
                est = se_uc = se_bc = np.nan
            else:
                e = res.get(t.estimate)
                est, se_uc, se_bc = e.estimate, e.se_uc, e.se_bc
            records.append(ReplicateRecord(rep, spec.method, spec.cell, t.parameter, est, se_uc, se_bc, status))
        if spec.curve_truth is not None and res is not None and status == "ok" and res.dose_response is not None:
            curves.append((spec.method, spec.cell, res.dose_response.estimates - np.asarray(spec.curve_truth)))
    return records, curves


def _run_chunk(args):
    design, reps = args
    return [_run_replicate(design, r) for r in reps]


def run_study(design: StudyDesign, threads: int = 1) -> MetricsTable:
    """Fit every (replicate, method) cell and aggregate the metrics.

    Replicate ``r`` draws its data and perturbations from streams keyed by
    ``(seed, r)``.  The result therefore does not depend on ``threads``,
    which only sets the number of worker processes.
    """
    reps = list(range(design.R))
    if threads <= 1 or design.R == 1:
        outputs = [_run_replicate(design, r) for r in reps]
    else:
        chunks = [reps[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, [(design, c) for c in chunks]))
        by_rep = {}
        for c, out in zip(chunks, parts):
            by_rep.update(zip(c, out))
        outputs = [by_rep[r] for r in reps]
    records = [rec for recs, _ in outputs for rec in recs]
    return MetricsTable(
        design.generator, design.n, design.R, design.seed,
        tuple(_aggregate(design, records)), tuple(records), tuple(_curves(design, outputs)),
    )


def _aggregate(design: StudyDesign, records):
    z = stats.norm.ppf(1.0 - design.alpha / 2.0)
    rows = []
    for spec in design.methods:
        for t in spec.targets:
            sel = [r for r in records if r.method == spec.method and r.cell == spec.cell and r.parameter == t.parameter]
            ok = [r for r in sel if r.status == "ok" and np.isfinite(r.estimate)]
            est = np.array([r.estimate for r in ok])
            nan = float("nan")
            if est.size == 0:
                rows.append(MetricsRow(spec.cell, spec.method, t.parameter, t.truth, 0, len(sel), *([nan] * 6)))
                continue
            err = est - t.truth
            ese = 100.0 * float(np.std(est, ddof=1)) if est.size > 1 else 0.0
            cols = []
            for kind in ("se_uc", "se_bc"):
                se = np.array([getattr(r, kind) for r in ok])
                if not np.all(np.isfinite(se)):
                    cols += [nan, nan]
                    continue
                cols += [100.0 * float(se.mean()), 100.0 * float(np.mean(np.abs(err) <= z * se))]
            rows.append(MetricsRow(spec.cell, spec.method, t.parameter, t.truth, len(ok), len(sel) - len(ok),
                                   100.0 * float(err.mean()), ese, *cols))
    return rows


def _curves(design: StudyDesign, outputs):
    out = []
    for spec in design.methods:
        if spec.curve_truth is None:
            continue
        biases = [b for _, curves in outputs for m, c, b in curves if m == spec.method and c == spec.cell]
        if not biases:
            continue
        mean_bias = np.mean(biases, axis=0)
        for a, b in zip(np.asarray(spec.request.grid)[:, 0], mean_bias):
            out.append((float(a), spec.cell, spec.method, float(b)))
    return out


# ---------------------------------------------------------------------------
# Default studies
# ---------------------------------------------------------------------------

D = DesignSpec
SIM1_GRID = np.round(np.linspace(-1.0, 2.0, 31), 10)
CORRECTION_NAMES = {"oracle": "Oracle", "naive": "Naive", "cs": "CS", "rc": "RC", "simex": "SIMEX"}


def sim1_truth(a):
    a = np.asarray(a, dtype=float)
    return 0.25 * a + 0.5 * a**2 - 0.5 * a**3 + 0.5


def _sim1_methods(corrections, draws):
    outcome = MeanModel(D((("A",), ("A", "A"), ("A", "A", "A"), ("L",))))
    truth = tuple(float(v) for v in sim1_truth(SIM1_GRID))
    out = []
    for c in corrections:
        req = EstimatorRequest("gformula", c, outcome=outcome, grid=SIM1_GRID, draws=draws)
        out.append(MethodSpec(f"{CORRECTION_NAMES[c]} G-Formula", req, (Target("eta(1)", "eta(1)", 0.75),),
                              curve_truth=truth))
    return out


def _sim2_methods(corrections, draws):
    msm = MeanModel(D((("A1",), ("A2",))))
    ps = PropensitySpec((("A1", D((("L", "L"),))), ("A2", D((("L", "L"),)))))
    targets = (Target("gamma0", "gamma:1", 0.0), Target("gamma1", "gamma:A1", 1.0), Target("gamma2", "gamma:A2", 1.0))
    return [
        MethodSpec(f"{CORRECTION_NAMES[c]} IPW", EstimatorRequest("ipw", c, msm=msm, propensity=ps, draws=draws), targets)
        for c in corrections
    ]


SIM3_OUTCOME = {
    True: MeanModel(D((("A",), ("L1",), ("L2",), ("A", "L1"), ("A", "L2")))),
    False: MeanModel(D((("A",), ("L2",), ("A", "L2")))),
}
SIM3_PROPENSITY = {True: PropensitySpec((("A", D((("L1",), ("L2",)))),)), False: PropensitySpec((("A", D((("L2",),))),))}
SIM3_CELLS = (("PS and OR", True, True), ("PS only", True, False), ("OR only", False, True), ("Neither", False, False))
SIM3_GAMMA1 = 0.175


def _sim3_methods(corrections, draws, cells=SIM3_CELLS, methods=("dr", "gformula", "ipw")):
    msm = MeanModel(D((("A",),)))
    grid, contrast = [0.0, 1.0], [(1, 0)]
    gf = {k: {} for k in (True, False)}
    ipw = {k: {} for k in (True, False)}
    out = []
    for c in corrections:
        name = CORRECTION_NAMES[c]
        for k in (True, False):
            gf[k][c] = EstimatorRequest("gformula", c, outcome=SIM3_OUTCOME[k], grid=grid, contrasts=contrast, draws=draws)
            ipw[k][c] = EstimatorRequest("ipw", c, msm=msm, propensity=SIM3_PROPENSITY[k], draws=draws)
        for cell, ps_ok, or_ok in cells:
            dr = EstimatorRequest("dr", c, outcome=SIM3_OUTCOME[or_ok], propensity=SIM3_PROPENSITY[ps_ok],
                                  grid=grid, contrasts=contrast, draws=draws)
            contrast_target = (Target("gamma1", "eta(1)-eta(0)", SIM3_GAMMA1),)
            if "dr" in methods:
                out.append(MethodSpec(f"{name} DR", dr, contrast_target, cell))
            if "gformula" in methods:
                out.append(MethodSpec(f"{name} G-Formula", gf[or_ok][c], contrast_target, cell))
            if "ipw" in methods:
                out.append(MethodSpec(f"{name} IPW", ipw[ps_ok][c], (Target("gamma1", "gamma:A", SIM3_GAMMA1),), cell))
    return out


DEFAULT_CORRECTIONS = {
    "sim1": ("oracle", "naive", "cs", "rc", "simex"),
    "sim2": ("oracle", "naive", "cs", "rc", "simex"),
    "sim3": ("cs",),
    "reliability_sweep": ("naive", "cs"),
    "estimated_sigma": ("cs",),
    "positivity": ("oracle", "naive", "cs"),
    "multiplicative": ("naive", "cs"),
    "two_phase": ("oracle", "naive", "cs"),
}
DEFAULT_N = {"sim1": 800, "sim2": 800, "sim3": 2000, "reliability_sweep": 800, "estimated_sigma": 800,
             "positivity": 800, "multiplicative": 800, "two_phase": 2000}
DEFAULT_R = 500


def default_study(
    generator: str,
    n: int | None = None,
    R: int = DEFAULT_R,
    seed: int = 0,
    corrections=None,
    params: dict | None = None,
    draws: int = 32,
) -> StudyDesign:
    """Study with the estimators, models and truths used for each design."""
    if generator not in GENERATORS:
        raise SpecificationError(f"unknown design {generator!r}; available: {', '.join(GENERATORS)}")
    corrections = tuple(corrections or DEFAULT_CORRECTIONS[generator])
    bad = [c for c in corrections if c not in CORRECTION_NAMES]
    if bad:
        raise SpecificationError(f"unknown correction {bad[0]!r}; expected a subset of {', '.join(CORRECTION_NAMES)}")
    if generator == "sim1":
        methods = _sim1_methods(corrections, draws)
    elif generator == "sim3":
        methods = _sim3_methods(corrections, draws)
    elif generator == "two_phase":
        methods = _sim3_methods(corrections, draws, cells=(("PS and OR", True, True),), methods=("dr",))
    else:
        methods = _sim2_methods(corrections, draws)
    return StudyDesign(generator, n or DEFAULT_N[generator], R, seed, tuple(methods), dict(params or {}))
