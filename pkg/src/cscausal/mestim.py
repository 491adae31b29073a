"""Stacked estimating equations: damped Newton solver, numerical Jacobians,
empirical sandwich and bias-corrected sandwich variances, Wald intervals and
delta-method contrasts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .core import FitResult, ParameterVector
from .errors import DimensionError, NumericDomainError, VarianceError

FD_STEP = float(np.finfo(float).eps) ** (1.0 / 3.0)
LEVERAGE_CAP = 0.75


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    max_iter: int = 100
    damping: float = 1.0
    min_damping: float = 1.0 / 64.0
    fd_step: float = FD_STEP

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.min_damping <= self.damping:
            raise ValueError("damping must satisfy 0 < min_damping <= damping")


@dataclass(frozen=True)
class Block:
    """Rows of a stacked estimating function.

    ``fn(theta)`` returns an ``(n, rows)`` array; ``depends`` lists the
    parameter indices the rows can change with.  Jacobian columns for other
    parameters are exactly zero and are never evaluated.
    """

    name: str
    rows: int
    fn: Callable[[np.ndarray], np.ndarray]
    depends: np.ndarray | None = None


class EstimatingFunction:
    """Per-observation estimating function psi(i, theta) stacked from blocks.

    Observation weights multiply every row before any summation.
    """

    def __init__(self, blocks: Sequence[Block], dim: int, n: int, weights=None):
        self.blocks = tuple(blocks)
        self.dim = int(dim)
        self.n = int(n)
        if sum(b.rows for b in self.blocks) != self.dim:
            raise DimensionError("block rows must add up to the parameter dimension")
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        if self.weights is not None and self.weights.shape != (self.n,):
            raise DimensionError("weights must have one entry per observation")
        self._depends = [
            np.arange(self.dim) if b.depends is None else np.unique(np.asarray(b.depends, dtype=int))
            for b in self.blocks
        ]

    @classmethod
    def from_function(cls, fn, dim: int, n: int, weights=None) -> "EstimatingFunction":
        """Wrap a vectorised ``fn(theta) -> (n, dim)``."""
        return cls([Block("psi", dim, fn)], dim, n, weights)

    @classmethod
    def from_rowwise(cls, fn, dim: int, n: int, weights=None) -> "EstimatingFunction":
        """Wrap ``fn(i, theta) -> (dim,)`` evaluated one observation at a time."""

        def stacked(theta):
            return np.array([np.atleast_1d(fn(i, theta)) for i in range(n)], dtype=float).reshape(n, dim)

        return cls.from_function(stacked, dim, n, weights)

    def _weighted(self, out):
        return out if self.weights is None else out * self.weights[:, None]

    def _block_values(self, k, theta):
        out = np.asarray(self.blocks[k].fn(theta), dtype=float)
        if out.shape != (self.n, self.blocks[k].rows):
            raise DimensionError(
                f"block {self.blocks[k].name!r} returned shape {out.shape}, expected {(self.n, self.blocks[k].rows)}"
            )
        return out

    def contributions(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DimensionError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        parts = [self._block_values(k, theta) for k in range(len(self.blocks))]
        out = self._weighted(np.concatenate(parts, axis=1) if parts else np.empty((self.n, 0)))
        if not np.all(np.isfinite(out)):
            bad = int(np.argwhere(~np.all(np.isfinite(out), axis=1))[0, 0])
            raise NumericDomainError("non-finite estimating function value", theta=theta, observation=bad)
        return out

    def __call__(self, i: int, theta) -> np.ndarray:
        return self.contributions(theta)[i]

    def total(self, theta) -> np.ndarray:
        return self.contributions(theta).sum(axis=0)

    def jacobian_contributions(self, theta, fd_step: float = FD_STEP) -> np.ndarray:
        """Per-observation central-difference Jacobians, shape ``(n, dim, dim)``."""
        theta = np.asarray(theta, dtype=float)
        jac = np.zeros((self.n, self.dim, self.dim))
        row = 0
        for k, block in enumerate(self.blocks):
            cols = self._depends[k]
            sub_theta = theta.copy()

            def f(t, _k=k, _cols=cols, _base=sub_theta):
                full = _base.copy()
                full[_cols] = t
                return self._block_values(_k, full)

            jac[:, row : row + block.rows][:, :, cols] = numerical_jacobian(f, theta[cols], fd_step)
            row += block.rows
        if self.weights is not None:
            jac *= self.weights[:, None, None]
        return jac

    def jacobian(self, theta, fd_step: float = FD_STEP) -> np.ndarray:
        return self.jacobian_contributions(theta, fd_step).sum(axis=0)


def numerical_jacobian(psi_sum, theta, fd_step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``psi_sum`` at ``theta``.

    Output shape is ``psi_sum(theta).shape + (len(theta),)``; the step for
    coordinate j is ``fd_step * max(1, |theta_j|)``.
    """
    theta = np.asarray(theta, dtype=float)
    base = np.asarray(psi_sum(theta), dtype=float)
    jac = np.empty(base.shape + (theta.size,))
    for j in range(theta.size):
        h = fd_step * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        up = np.asarray(psi_sum(tp), dtype=float)
        dn = np.asarray(psi_sum(tm), dtype=float)
        diff = (up - dn) / (tp[j] - tm[j])
        if not np.all(np.isfinite(diff)):
            raise NumericDomainError(f"non-finite difference in Jacobian column {j}", theta=theta)
        jac[..., j] = diff
    return jac


def solve(psi: EstimatingFunction, theta0, opts: SolveOptions | None = None) -> FitResult:
    """Find a root of ``sum_i psi(i, theta)`` by damped Newton iteration.

    Variances in the returned result are left empty (NaN); call
    :func:`sandwich` to fill them.  A singular Jacobian or an exhausted
    iteration budget yields ``converged=False`` with the best iterate.
    """
    opts = opts or SolveOptions()
    template = theta0 if isinstance(theta0, ParameterVector) else None
    theta = np.array(theta0.values if template else theta0, dtype=float)
    if theta.shape != (psi.dim,):
        raise DimensionError(f"theta0 has length {theta.size}, estimating function has dimension {psi.dim}")

    target = opts.tol * psi.n
    f = psi.total(theta)
    res = float(np.max(np.abs(f), initial=0.0))
    best_theta, best_res = theta.copy(), res
    converged = res <= target
    it = 0
    while not converged and it < opts.max_iter:
        it += 1
        jac = psi.jacobian(theta, opts.fd_step)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        scale = opts.damping
        while True:
            trial = theta + scale * step
            try:
                f_trial = psi.total(trial)
                res_trial = float(np.max(np.abs(f_trial), initial=0.0))
            except (NumericDomainError, FloatingPointError):
                res_trial = np.inf
            if res_trial < res or scale <= opts.min_damping:
                break
            scale *= 0.5
        if not np.isfinite(res_trial):
            break
        theta, f, res = trial, f_trial, res_trial
        if res < best_res:
            best_theta, best_res = theta.copy(), res
        converged = res <= target

    values = theta if converged else best_theta
    pv = template.with_values(values) if template else ParameterVector(values, {"theta": slice(0, psi.dim)})
    nan = np.full((psi.dim, psi.dim), np.nan)
    return FitResult(pv, nan, nan.copy(), bool(converged), it, res if converged else best_res)


def _bread_meat(psi: EstimatingFunction, theta, fd_step):
    contrib = psi.contributions(theta)
    jac_i = -psi.jacobian_contributions(theta, fd_step)
    return contrib, jac_i


def _invert_bread(bread_sum: np.ndarray) -> np.ndarray:
    cond = float(np.linalg.cond(bread_sum)) if bread_sum.size else 1.0
    if not np.isfinite(cond) or cond > 1e14:
        raise VarianceError("singular bread matrix in sandwich variance", cond)
    return np.linalg.inv(bread_sum)


def _sandwich_from_parts(contrib, jac_i, leverage_cap: float | None):
    n = contrib.shape[0]
    bread = jac_i.sum(axis=0)
    bread_inv = _invert_bread(bread / n)
    if leverage_cap is None:
        meat = contrib.T @ contrib / n
    else:
        # leverage of observation i on parameter j: diag(A_i (sum_k A_k)^{-1})
        lev = np.einsum("ijk,kj->ij", jac_i, bread_inv / n)
        infl = (1.0 - np.minimum(leverage_cap, lev)) ** -0.5
        adj = contrib * infl
        meat = adj.T @ adj / n
    v = bread_inv @ meat @ bread_inv.T / n
    return 0.5 * (v + v.T)


def sandwich_variance(psi: EstimatingFunction, theta_hat, fd_step: float = FD_STEP) -> np.ndarray:
    """Empirical sandwich ``A^{-1} B A^{-T} / n`` at a root ``theta_hat``."""
    theta = np.asarray(getattr(theta_hat, "values", theta_hat), dtype=float)
    contrib, jac_i = _bread_meat(psi, theta, fd_step)
    return _sandwich_from_parts(contrib, jac_i, None)


def bias_corrected_variance(
    psi: EstimatingFunction, theta_hat, fd_step: float = FD_STEP, cap: float = LEVERAGE_CAP
) -> np.ndarray:
    """Fay-Graubard small-sample corrected sandwich.

    Each contribution psi_ij is inflated by ``(1 - min(cap, H_ij))^{-1/2}``
    with ``H_ij`` the j-th diagonal entry of ``A_i (sum_k A_k)^{-1}``.
    """
    theta = np.asarray(getattr(theta_hat, "values", theta_hat), dtype=float)
    contrib, jac_i = _bread_meat(psi, theta, fd_step)
    return _sandwich_from_parts(contrib, jac_i, cap)


def sandwich(psi: EstimatingFunction, fit: FitResult, fd_step: float = FD_STEP) -> FitResult:
    """Return ``fit`` with both the uncorrected and bias-corrected sandwich filled in.

    The per-observation Jacobian is computed once and shared.
    """
    theta = fit.theta_hat.values
    contrib, jac_i = _bread_meat(psi, theta, fd_step)
    v_uc = _sandwich_from_parts(contrib, jac_i, None)
    v_bc = _sandwich_from_parts(contrib, jac_i, LEVERAGE_CAP)
    return FitResult(fit.theta_hat, v_uc, v_bc, fit.converged, fit.iterations, fit.max_residual)


def wald_ci(estimate: float, se: float, alpha: float = 0.05) -> tuple[float, float]:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if se < 0:
        raise ValueError("standard error must be nonnegative")
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    return estimate - z * se, estimate + z * se


def delta_method(g, theta_hat, vcov, fd_step: float = FD_STEP) -> tuple[float, float]:
    """Estimate and standard error of a smooth scalar function of theta."""
    theta = np.asarray(getattr(theta_hat, "values", theta_hat), dtype=float)
    est = float(g(theta))
    grad = numerical_jacobian(lambda t: np.atleast_1d(g(t)), theta, fd_step)[0]
    if not np.all(np.isfinite(grad)):
        raise NumericDomainError("non-finite gradient in delta method", theta=theta)
    var = float(grad @ np.asarray(vcov) @ grad)
    return est, float(np.sqrt(max(var, 0.0)))


def linear_contrast(weights, theta_hat, vcov) -> tuple[float, float]:
    """Delta method for a linear function ``weights @ theta`` (exact gradient)."""
    w = np.asarray(weights, dtype=float)
    theta = np.asarray(getattr(theta_hat, "values", theta_hat), dtype=float)
    return float(w @ theta), float(np.sqrt(max(float(w @ np.asarray(vcov) @ w), 0.0)))
