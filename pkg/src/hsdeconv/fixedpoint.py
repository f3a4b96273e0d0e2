"""Fixed-point engine: Picard iteration and Anderson extrapolation over any map.

Both drivers operate on plain float arrays of any shape, trace the Frobenius
norm between successive iterates, and stop on a relative-residual tolerance.
The engine is reentrant; each solve owns its history buffers.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cube import SpectralCube
from .degrade import BlurKernel
from .denoiser import DenoiserModel
from . import hqs

_NORM_FLOOR = 1e-30


class NonFiniteIterate(Exception):
    """A NaN/Inf iterate was produced; carries the partial trace."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class FixedPointConfig:
    max_iters: int = 15
    tol: float = 1e-6            # relative residual stop; 0 runs all iterations
    anderson_m: int = 5          # history depth; 0 selects plain iteration
    anderson_gamma: float = 1.0  # mixing weight
    anderson_ridge: float = 1e-10
    store_iterates: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")
        if self.anderson_m < 0:
            raise ValueError(f"anderson_m must be >= 0, got {self.anderson_m}")
        if not 0.0 < self.anderson_gamma <= 1.0:
            raise ValueError(f"anderson_gamma must be in (0, 1], got {self.anderson_gamma}")
        if self.anderson_ridge < 0:
            raise ValueError(f"anderson_ridge must be >= 0, got {self.anderson_ridge}")

    def replace(self, **kw) -> "FixedPointConfig":
        vals = dict(
            max_iters=self.max_iters, tol=self.tol, anderson_m=self.anderson_m,
            anderson_gamma=self.anderson_gamma, anderson_ridge=self.anderson_ridge,
            store_iterates=self.store_iterates,
        )
        vals.update(kw)
        return FixedPointConfig(**vals)


@dataclass
class FixedPointTrace:
    residuals: list = field(default_factory=list)   # ||x_{k+1} - x_k||_F per iteration
    converged: bool = False
    iters_used: int = 0
    iterates_kept: list = None
    anderson_fallbacks: int = 0


def _check_finite(arr, trace):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteIterate(
            f"non-finite iterate at iteration {trace.iters_used + 1}", trace)


def _record(trace, x_new, x_old, cfg):
    resid = float(np.linalg.norm(x_new - x_old))
    trace.residuals.append(resid)
    trace.iters_used += 1
    if cfg.store_iterates:
        trace.iterates_kept.append(x_new.copy())
    return resid <= cfg.tol * max(np.linalg.norm(x_new), _NORM_FLOOR)


def solve_plain(step, x0: np.ndarray, cfg: FixedPointConfig):
    """Picard iteration x <- g(x) until relative residual <= tol or max_iters."""
    x = np.asarray(x0, dtype=np.float64).copy()
    trace = FixedPointTrace(iterates_kept=[] if cfg.store_iterates else None)
    for _ in range(cfg.max_iters):
        x_new = step(x)
        _check_finite(x_new, trace)
        done = _record(trace, x_new, x, cfg)
        x = x_new
        if done:
            trace.converged = True
            break
    return x, trace


def _anderson_beta(u_cols: np.ndarray, ridge: float):
    """Weights minimizing ||U beta||^2 + ridge||beta||^2 subject to sum(beta) = 1.

    Normal equations with a Lagrange multiplier for the constraint; the ridge
    also nudges the weights toward an average over the history, which keeps
    the extrapolation stable when the underlying iteration is barely (or not)
    contractive. Falls back to a constrained SVD least-squares if the KKT
    system cannot be solved.
    """
    m = u_cols.shape[1]
    if m == 1:
        # the constraint pins the single weight exactly
        return np.ones(1)
    gram = u_cols.T @ u_cols + ridge * np.eye(m)
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = 2.0 * gram
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    try:
        beta = np.linalg.solve(kkt, rhs)[:m]
        if np.all(np.isfinite(beta)):
            return beta
    except np.linalg.LinAlgError:
        pass
    # difference parameterization keeps the constraint exact under lstsq
    last = u_cols[:, -1]
    diffs = u_cols[:, :-1] - last[:, None]
    try:
        gamma = np.linalg.lstsq(diffs, -last, rcond=None)[0]
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(gamma)):
        return None
    return np.concatenate([gamma, [1.0 - gamma.sum()]])


def solve_anderson(step, x0: np.ndarray, cfg: FixedPointConfig):
    """Anderson-extrapolated iteration with history depth m.

    During warm-up (fewer than m iterates) all available history is used. A
    singular weight system falls back to a plain step for that iteration.
    """
    if cfg.anderson_m < 1:
        raise ValueError("solve_anderson needs anderson_m >= 1")
    x = np.asarray(x0, dtype=np.float64).copy()
    trace = FixedPointTrace(iterates_kept=[] if cfg.store_iterates else None)
    xs, gs = [], []
    for _ in range(cfg.max_iters):
        gx = step(x)
        _check_finite(gx, trace)
        xs.append(x.ravel().copy())
        gs.append(gx.ravel())
        if len(xs) > cfg.anderson_m:
            xs.pop(0)
            gs.pop(0)
        x_mat = np.stack(xs, axis=1)
        g_mat = np.stack(gs, axis=1)
        beta = _anderson_beta(g_mat - x_mat, cfg.anderson_ridge)
        if beta is None:
            trace.anderson_fallbacks += 1
            x_new = gx
        else:
            mixed = g_mat @ beta
            if cfg.anderson_gamma != 1.0:
                mixed = cfg.anderson_gamma * mixed + (1.0 - cfg.anderson_gamma) * (x_mat @ beta)
            x_new = mixed.reshape(x.shape)
        _check_finite(x_new, trace)
        done = _record(trace, x_new, x, cfg)
        x = x_new
        if done:
            trace.converged = True
            break
    return x, trace


def solve(step, x0: np.ndarray, cfg: FixedPointConfig):
    """Dispatch on anderson_m: 0 selects plain iteration."""
    if cfg.anderson_m == 0:
        return solve_plain(step, x0, cfg)
    return solve_anderson(step, x0, cfg)


def infer(y: SpectralCube, kernel: BlurKernel, model: DenoiserModel, b: float,
          cfg: FixedPointConfig):
    """Restore a degraded cube by solving for the fixed point of the HQS step.

    The initial iterate is the degraded observation itself. max_iters may be
    set independently of any count used in training.
    """
    ctx = hqs.build_context(kernel, y, b)
    x_star, trace = solve(lambda arr: hqs.iterate_raw(arr, ctx, model), y.data, cfg)
    return SpectralCube(x_star), trace


def export_trace_csv(trace: FixedPointTrace, path) -> Path:
    p = Path(path)
    with open(p, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "residual"])
        for i, r in enumerate(trace.residuals, start=1):
            writer.writerow([i, f"{r:.17g}"])
    return p
