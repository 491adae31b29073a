"""Command-line interface: ``fit``, ``simulate`` and ``sensitivity``.

Exit codes: 0 success, 1 usage or data error, 2 numerical or convergence
failure.  Every CSV written starts with a comment line carrying the
configuration hash and the seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, load_config
from .errors import (
    CollinearityError,
    CsCausalError,
    DivergentCorrectionError,
    InfeasibleErrorVarianceError,
    NumericDomainError,
    SimexError,
    VarianceError,
)
from .estimators import fit, sensitivity_grid
from .simlab import GENERATORS, default_study, run_study

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (
    NumericDomainError, VarianceError, DivergentCorrectionError, CollinearityError, SimexError,
    InfeasibleErrorVarianceError, ArithmeticError, np.linalg.LinAlgError,
)
THREADS_ENV = "CSCAUSAL_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _num(x) -> str:
    x = float(x)
    return repr(x) if np.isfinite(x) else "NA"


def _write(path: Path, text: str) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_text(header_line: str, header, rows) -> str:
    buf = io.StringIO()
    buf.write(header_line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _versions() -> dict:
    return {"cscausal": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _manifest(out: Path, sha: str, seed: int, command: str, files, extra=None) -> None:
    body = {"command": command, "config_sha256": sha, "seed": seed, "versions": _versions(), "files": sorted(files)}
    body.update(extra or {})
    _write(out / "manifest.json", json.dumps(body, indent=2, sort_keys=True) + "\n")


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

EST_HEADER = ["parameter", "estimate", "se_uc", "lo_uc", "hi_uc", "se_bc", "lo_bc", "hi_bc"]


def _estimate_rows(estimates, alpha):
    rows = []
    for e in estimates:
        lo_u, hi_u = e.ci(alpha, "uc")
        lo_b, hi_b = e.ci(alpha, "bc")
        rows.append([e.name, _num(e.estimate), _num(e.se_uc), _num(lo_u), _num(hi_u), _num(e.se_bc), _num(lo_b),
                     _num(hi_b)])
    return rows


def _dose_rows(dose, prefix=()):
    ci_u, ci_b = dose.ci("uc"), dose.ci("bc")
    rows = []
    for g in range(len(dose.grid)):
        rows.append([*prefix, *(_num(v) for v in dose.grid[g]), _num(dose.estimates[g]), _num(dose.se_uc[g]),
                     _num(ci_u[g, 0]), _num(ci_u[g, 1]), _num(dose.se_bc[g]), _num(ci_b[g, 0]), _num(ci_b[g, 1])])
    return rows


def _dose_header(names):
    return [*names, "estimate", "se_uc", "lo_uc", "hi_uc", "se_bc", "lo_bc", "hi_bc"]


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    req = cfg.request
    res = fit(req, cfg.data)
    files = ["estimates.csv", "covariance.json"]
    _write(out / "estimates.csv", _csv_text(cfg.manifest_line, EST_HEADER, _estimate_rows(res.all_estimates(), req.alpha)))
    theta = res.fit.theta_hat
    cov = {
        "config_sha256": cfg.sha256, "seed": cfg.seed, "labels": list(theta.labels),
        "vcov_uc": [[_json_num(v) for v in row] for row in res.fit.vcov_uc],
        "vcov_bc": [[_json_num(v) for v in row] for row in res.fit.vcov_bc],
    }
    _write(out / "covariance.json", json.dumps(cov, indent=2) + "\n")
    if res.dose_response is not None:
        files.append("dose_response.csv")
        text = _csv_text(cfg.manifest_line, _dose_header(cfg.data.exposure_names), _dose_rows(res.dose_response))
        _write(out / "dose_response.csv", text)
    _manifest(out, cfg.sha256, cfg.seed, "fit", files, {"converged": bool(res.converged), "iterations": res.fit.iterations})
    if not res.converged:
        print(f"fit did not converge (max residual {res.fit.max_residual:.3g})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _json_num(v):
    v = float(v)
    return v if np.isfinite(v) else None


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _parse_params(items):
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        try:
            params[key] = float(value)
        except ValueError:
            raise ConfigError(f"--param {key}: {value!r} is not a number") from None
    return params


def _study_settings(args) -> dict:
    settings = {"design": args.design, "n": None, "R": 500, "seed": 0, "corrections": None, "params": {}, "draws": 32}
    path = Path(args.design)
    if args.design not in GENERATORS and path.suffix == ".toml":
        from .config import tomllib

        try:
            file_cfg = tomllib.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read design file: {exc.strerror}", path) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(exc), path) from None
        unknown = set(file_cfg) - set(settings)
        if unknown:
            raise ConfigError(f"unknown design-file keys: {', '.join(sorted(unknown))}", path)
        settings.update(file_cfg)
    if settings["design"] not in GENERATORS:
        raise ConfigError(f"unknown design {settings['design']!r}; available designs: {', '.join(GENERATORS)}")
    for key in ("n", "R", "seed", "draws"):
        if getattr(args, key, None) is not None:
            settings[key] = getattr(args, key)
    if args.corrections:
        settings["corrections"] = args.corrections.split(",")
    settings["params"] = {**settings["params"], **_parse_params(args.param)}
    if settings["R"] < 1:
        raise ConfigError(f"--R must be at least 1, got {settings['R']}")
    if settings["n"] is not None and settings["n"] < 1:
        raise ConfigError(f"--n must be at least 1, got {settings['n']}")
    return settings


def cmd_simulate(args) -> int:
    s = _study_settings(args)
    study = default_study(s["design"], s["n"], s["R"], s["seed"], s["corrections"], s["params"], s["draws"])
    resolved = dict(s, n=study.n, corrections=sorted({m.request.correction for m in study.methods}))
    sha = hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()
    line = f"# config_sha256={sha} seed={study.seed}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = run_study(study, threads=resolve_threads(args.threads))
    files = ["metrics.csv"]
    _write(out / "metrics.csv", line + "\n" + table.to_csv())
    if args.audit:
        files.append("audit.csv")
        _write(out / "audit.csv", line + "\n" + table.audit_csv())
    if table.curves:
        files.append("curves.csv")
        _write(out / "curves.csv", line + "\n" + table.curves_csv())
    _manifest(out, sha, study.seed, "simulate", files, {"settings": resolved, "warning": table.warning})
    if table.warning:
        print("WARNING: more than 5% of replicates failed in at least one cell; see metrics.csv", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------


def cmd_sensitivity(args) -> int:
    cfg = load_config(args.config)
    if not cfg.sigma_grid:
        raise ConfigError("sensitivity needs a [sigma_me] grid (grid = [...] or matrix with scales)", cfg.path)
    req = cfg.request
    if req.grid is None:
        raise ConfigError("sensitivity needs a dose grid in [estimator]", cfg.path)
    cells = sensitivity_grid(req, cfg.data, cfg.sigma_grid, cfg.scales)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cell in cells:
        tag = [_num(cell.scale), " ".join(_num(v) for v in cell.sigma.sigma.ravel())]
        if cell.ok:
            rows += _dose_rows(cell.result.dose_response, tag)
        else:
            print(f"sensitivity cell scale={cell.scale:g} failed: {cell.error}", file=sys.stderr)
    header = _dose_header(["scale", "sigma_me", *cfg.data.exposure_names])
    _write(out / "sensitivity.csv", _csv_text(cfg.manifest_line, header, rows))
    n_ok = sum(c.ok for c in cells)
    _manifest(out, cfg.sha256, cfg.seed, "sensitivity", ["sensitivity.csv"],
              {"cells": len(cells), "cells_ok": n_ok, "failures": [c.error for c in cells if not c.ok]})
    return EXIT_OK if n_ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker processes (default: ${THREADS_ENV} or the number of cores)")

    parser = _Parser(prog="cscausal", description="Corrected-score causal estimators under exposure measurement error.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", parents=[common], help="fit one estimator from a TOML configuration")
    p.add_argument("config")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", parents=[common], help="run a simulation study")
    p.add_argument("design", help=f"design id ({', '.join(GENERATORS)}) or a TOML design file")
    p.add_argument("--n", type=int)
    p.add_argument("--R", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--draws", type=int, help="Monte-Carlo draws B for the corrected score")
    p.add_argument("--corrections", help="comma-separated subset of oracle,naive,cs,rc,simex")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="generator parameter override")
    p.add_argument("--audit", action="store_true", help="also write per-replicate estimates")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sensitivity", parents=[common], help="refit over a grid of assumed error covariances")
    p.add_argument("config")
    p.set_defaults(func=cmd_sensitivity)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CsCausalError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
