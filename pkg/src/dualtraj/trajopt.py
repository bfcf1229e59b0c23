"""Design-vector optimization and finite-difference derivative utilities.

The objectives are rollout-based, so derivatives come from central finite
differences.  The default solver is a BFGS quasi-Newton iteration with
backtracking line search and projection onto box bounds; a seeded
derivative-free evolutionary mode is available for objectives with capped
or noisy regions where finite differences are unreliable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import differential_evolution


class OptimizationError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "quasi-newton"   # or "gradient", "evolutionary"
    max_iters: int = 100
    tol: float = 1e-8              # relative objective decrease
    fd_step: float = 1e-5          # relative central-difference step
    seed: int = 0
    bounds: np.ndarray = None      # (n_d, 2) box, optional
    popsize: int = 12              # evolutionary population multiplier

    def __post_init__(self):
        if self.method not in ("quasi-newton", "gradient", "evolutionary"):
            raise OptimizationError(f"unknown method {self.method!r}")
        if self.tol <= 0 or self.fd_step <= 0 or self.max_iters < 1:
            raise OptimizationError("tolerances and iteration budget must be positive")
        if self.bounds is not None:
            b = np.asarray(self.bounds, dtype=float)
            if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 0] > b[:, 1]):
                raise OptimizationError("bounds must be well-ordered (n, 2)")
            object.__setattr__(self, "bounds", b)


@dataclass
class OptimizationResult:
    d: np.ndarray
    value: float
    trace: np.ndarray      # (iters, 3): iteration, best value, step norm
    converged: bool
    n_evals: int


class _CachedObjective:
    """Memoizes objective evaluations; finite-difference stencils repeat points."""

    def __init__(self, fn):
        self.fn = fn
        self.cache = {}
        self.n_evals = 0

    def __call__(self, d):
        key = np.asarray(d, dtype=float).tobytes()
        if key not in self.cache:
            self.cache[key] = float(self.fn(np.asarray(d, dtype=float)))
            self.n_evals += 1
        return self.cache[key]


def fd_gradient(objective, d, step: float = 1e-5):
    """Central-difference gradient with a relative per-coordinate step.

    Non-finite neighbor values fall back to a one-sided difference.
    """
    d = np.asarray(d, dtype=float)
    g = np.empty(d.size)
    f0 = None
    for i in range(d.size):
        h = step * (1.0 + abs(d[i]))
        dp, dm = d.copy(), d.copy()
        dp[i] += h
        dm[i] -= h
        fp, fm = objective(dp), objective(dm)
        if np.isfinite(fp) and np.isfinite(fm):
            g[i] = (fp - fm) / (2 * h)
        else:
            if f0 is None:
                f0 = objective(d)
            if np.isfinite(fp):
                g[i] = (fp - f0) / h
            elif np.isfinite(fm):
                g[i] = (f0 - fm) / h
            else:
                g[i] = 0.0
    return g


def fd_hessian_block(objective, d, theta, which: str, step: float = 1e-4):
    """Second-derivative block of objective(d, theta) at an anchor point.

    which "dd": Hessian in d, symmetrized.  which "dtheta": mixed block
    d2J/(dd dtheta) with rows indexed by d.  Four-point central stencils
    with per-coordinate relative steps.
    """
    d = np.asarray(d, dtype=float)
    theta = np.asarray(theta, dtype=float)
    hd = step * (1.0 + np.abs(d))
    if which == "dd":
        n = d.size
        H = np.empty((n, n))
        f0 = objective(d, theta)
        for i in range(n):
            ei = np.zeros(n)
            ei[i] = hd[i]
            H[i, i] = (
                objective(d + ei, theta) - 2 * f0 + objective(d - ei, theta)
            ) / hd[i] ** 2
            for j in range(i + 1, n):
                ej = np.zeros(n)
                ej[j] = hd[j]
                H[i, j] = H[j, i] = (
                    objective(d + ei + ej, theta)
                    - objective(d + ei - ej, theta)
                    - objective(d - ei + ej, theta)
                    + objective(d - ei - ej, theta)
                ) / (4 * hd[i] * hd[j])
        return 0.5 * (H + H.T)
    if which == "dtheta":
        ht = step * (1.0 + np.abs(theta))
        H = np.empty((d.size, theta.size))
        for i in range(d.size):
            ei = np.zeros(d.size)
            ei[i] = hd[i]
            for j in range(theta.size):
                ej = np.zeros(theta.size)
                ej[j] = ht[j]
                H[i, j] = (
                    objective(d + ei, theta + ej)
                    - objective(d + ei, theta - ej)
                    - objective(d - ei, theta + ej)
                    + objective(d - ei, theta - ej)
                ) / (4 * hd[i] * ht[j])
        return H
    raise OptimizationError(f"unknown block {which!r}")


def _project(d, bounds):
    if bounds is None:
        return d
    return np.clip(d, bounds[:, 0], bounds[:, 1])


def optimize(objective, d0, cfg: OptimizerConfig) -> OptimizationResult:
    """Minimize a scalar objective over the design vector.

    Deterministic given the seed; returns the best iterate with a monotone
    best-so-far trace even when the tolerance is not reached.
    """
    d0 = np.asarray(d0, dtype=float)
    f = _CachedObjective(objective)
    if cfg.method == "evolutionary":
        return _optimize_de(f, d0, cfg)

    d = _project(d0.copy(), cfg.bounds)
    fd = f(d)
    if not np.isfinite(fd):
        raise OptimizationError("objective not finite at the initial design")
    n = d.size
    B = np.eye(n)       # inverse-Hessian approximation
    trace = [(0, fd, 0.0)]
    best_d, best_f = d.copy(), fd
    converged = False

    for it in range(1, cfg.max_iters + 1):
        g = fd_gradient(f, d, cfg.fd_step)
        gnorm = np.linalg.norm(g)
        if gnorm < 1e-12:
            converged = True
            break
        if cfg.method == "quasi-newton":
            p = -B @ g
            if p @ g > -1e-14 * gnorm * np.linalg.norm(p):
                # reset on loss of descent direction
                B = np.eye(n)
                p = -g
        else:
            p = -g
        # backtracking Armijo line search with box projection
        alpha = 1.0
        accepted = False
        for _ in range(40):
            d_new = _project(d + alpha * p, cfg.bounds)
            f_new = f(d_new)
            if np.isfinite(f_new) and f_new <= fd - 1e-4 * alpha * gnorm**2 * min(
                1.0, np.linalg.norm(p) / max(gnorm, 1e-300)
            ):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            d_new = _project(d + alpha * p, cfg.bounds)
            f_new = f(d_new)
            if not (np.isfinite(f_new) and f_new < fd):
                converged = True
                break
        step = d_new - d
        if cfg.method == "quasi-newton":
            g_new = fd_gradient(f, d_new, cfg.fd_step)
            y = g_new - g
            sy = step @ y
            if sy > 1e-12 * np.linalg.norm(step) * np.linalg.norm(y):
                rho = 1.0 / sy
                V = np.eye(n) - rho * np.outer(step, y)
                B = V @ B @ V.T + rho * np.outer(step, step)
        rel_drop = (fd - f_new) / max(abs(fd), 1e-300)
        d, fd = d_new, f_new
        if fd < best_f:
            best_d, best_f = d.copy(), fd
        trace.append((it, best_f, float(np.linalg.norm(step))))
        if 0 <= rel_drop < cfg.tol:
            converged = True
            break

    return OptimizationResult(
        d=best_d, value=best_f, trace=np.array(trace), converged=converged,
        n_evals=f.n_evals,
    )


def _optimize_de(f, d0, cfg: OptimizerConfig) -> OptimizationResult:
    if cfg.bounds is not None:
        bounds = [tuple(b) for b in cfg.bounds]
    else:
        span = 1.0 + np.abs(d0)
        bounds = [(v - 2 * s, v + 2 * s) for v, s in zip(d0, span)]
    trace = []

    def cb(intermediate_result):
        trace.append(
            (len(trace) + 1, float(intermediate_result.fun), 0.0)
        )

    res = differential_evolution(
        f, bounds, x0=d0, seed=cfg.seed, maxiter=cfg.max_iters,
        popsize=cfg.popsize, tol=cfg.tol, init="sobol", polish=False,
        callback=cb,
    )
    d_best, f_best = np.asarray(res.x, dtype=float), float(res.fun)
    f_start = f(d0)
    if f_start < f_best:
        d_best, f_best = d0.copy(), f_start
    trace.insert(0, (0, f_start, 0.0))
    best = np.minimum.accumulate([row[1] for row in trace])
    trace = np.array([(row[0], b, row[2]) for row, b in zip(trace, best)])
    return OptimizationResult(
        d=d_best, value=f_best, trace=trace, converged=bool(res.success),
        n_evals=f.n_evals,
    )


def export_trace_csv(result: OptimizationResult, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("iter,best_value,step_norm\n")
        for it, val, sn in result.trace:
            fh.write(f"{int(it)},{repr(float(val))},{repr(float(sn))}\n")
