"""Scalar objectives over the reference-trajectory design vector.

Four families: the nominal task cost, the Fisher-information-augmented
cost, the robust expected cost (second-order expansion of the task cost
over a Gaussian-mixture payload prior), and the optimality-loss cost
(task cost plus a quadratic penalty on the posterior parameter
covariance, weighted by the sensitivity of the optimal design to the
parameters).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .control import EstimatorState, ControllerGains
from .dynamics import InertialParams, ManipulatorModel
from .reference import BSplineTrajectory, SplineConfig, make_spline
from .simloop import ClosedLoop, RolloutLog, SimConfig, TaskCost, rollout, task_cost
from .trajopt import OptimizerConfig, fd_hessian_block, optimize
from .uq import (
    GaussianMixture,
    MomentTrajectory,
    propagate_moments,
    propagate_moments_batch,
)


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class EvalContext:
    """Everything needed to turn a design vector into a scalar objective.

    The boundary configurations, horizon and controller are fixed; the
    design vector selects the interior of the reference spline.  The
    controller's initial payload estimate is the prior mean regardless of
    the parameter value a rollout or expansion is evaluated at.
    """

    model: ManipulatorModel
    gains: ControllerGains
    spline: SplineConfig
    cost: TaskCost
    q0: np.ndarray
    qT: np.ndarray
    duration: float
    dt: float
    theta_prior: np.ndarray           # payload block (m, h_x, h_y, I)
    controller: str = "nac"
    fi_noise_cov: np.ndarray = None   # torque noise R for information integrals
    cost_cap: float = 1e6

    def __post_init__(self):
        for name in ("q0", "qT", "theta_prior"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=float)
            )
        n = self.model.n_links
        R = self.fi_noise_cov
        R = np.eye(n) if R is None else np.asarray(R, dtype=float)
        if R.ndim == 0:
            R = np.eye(n) * float(R)
        elif R.ndim == 1:
            R = np.diag(R)
        object.__setattr__(self, "fi_noise_cov", R)

    @property
    def n_design(self) -> int:
        return self.spline.n_free(self.q0.size)

    def make_traj(self, d) -> BSplineTrajectory:
        return make_spline(self.q0, self.qT, d, self.spline, self.duration)

    def sim_config(self, **overrides) -> SimConfig:
        base = dict(
            duration=self.duration, dt=self.dt, controller=self.controller,
            cost_cap=self.cost_cap,
        )
        base.update(overrides)
        return SimConfig(**base)

    def run(self, d, theta_l, theta_hat0=None, **overrides) -> RolloutLog:
        theta_hat0 = self.theta_prior if theta_hat0 is None else theta_hat0
        est = EstimatorState(
            theta_hat=np.asarray(theta_hat0, dtype=float),
            P=self.gains.rls_prior_cov,
        )
        payload = InertialParams(np.asarray(theta_l, dtype=float)[None])
        return rollout(
            self.model, payload, self.make_traj(d), self.gains, est,
            self.sim_config(**overrides),
        )

    def cost_of(self, d, theta_l, theta_hat0=None, **overrides) -> float:
        log = self.run(d, theta_l, theta_hat0=theta_hat0, **overrides)
        return task_cost(log, self.cost, self.model, cap=self.cost_cap)


def nominal_cost(d, theta_bar, ctx: EvalContext) -> float:
    """Deterministic task cost of the closed loop at the prior mean."""
    return ctx.cost_of(d, theta_bar)


# ---------------------------------------------------------------------------
# Fisher information


@dataclass(frozen=True)
class FisherInfo:
    """Information integral of the payload regressor against torque noise."""

    I: np.ndarray
    window: float
    R: np.ndarray

    def __post_init__(self):
        I = np.asarray(self.I, dtype=float)
        if np.any(np.abs(I - I.T) > 1e-12):
            raise ObjectiveError("information matrix must be symmetric")
        if np.any(np.linalg.eigvalsh(I) < -1e-10):
            raise ObjectiveError("information matrix must be PSD")
        object.__setattr__(self, "I", I)


def fisher_information(log: RolloutLog, R) -> FisherInfo:
    """I = integral of Y_l^T R^-1 Y_l over the logged window (trapezoid)."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 0:
        R = np.eye(log.Y_l.shape[1]) * R
    elif R.ndim == 1:
        R = np.diag(R)
    try:
        Rinv_Y = np.linalg.solve(R, log.Y_l)
    except np.linalg.LinAlgError as exc:
        raise ObjectiveError("noise covariance singular") from exc
    integrand = np.einsum("kip,kiq->kpq", log.Y_l, Rinv_Y)
    I = np.trapezoid(integrand, log.t, axis=0)
    I = 0.5 * (I + I.T)
    return FisherInfo(I=I, window=float(log.t[-1]), R=R)


def oed_criterion(info: FisherInfo, kind: str) -> float:
    """Scalar experiment-design criteria of the information matrix."""
    I = info.I
    if kind == "T":
        return float(np.trace(I))
    w = np.linalg.eigvalsh(I)
    if np.min(w) <= 1e-12 * max(np.max(w), 1.0):
        raise ObjectiveError(
            f"information matrix rank-deficient, criterion {kind} undefined"
        )
    if kind == "A":
        return float(np.sum(1.0 / w))
    if kind == "D":
        return float(np.prod(1.0 / w))
    if kind == "E":
        return float(1.0 / np.min(w))
    raise ObjectiveError(f"unknown criterion {kind!r}")


def j_fim(d, theta_bar, weight: float, ctx: EvalContext,
          criterion: str = "T") -> float:
    """Task cost minus an information reward from the same nominal rollout."""
    log = ctx.run(d, theta_bar)
    J = task_cost(log, ctx.cost, ctx.model, cap=ctx.cost_cap)
    if log.diverged:
        return J
    info = fisher_information(log, ctx.fi_noise_cov)
    psi = oed_criterion(info, criterion)
    # T is maximized, the inverse-based criteria are minimized
    return J - weight * psi if criterion == "T" else J + weight * psi


# ---------------------------------------------------------------------------
# robust expected cost


def _propagation_loop(ctx: EvalContext, traj) -> ClosedLoop:
    # discrete least-squares updates cannot live in the moment ODE; the
    # computed-torque estimate is held at the prior during propagation
    controller = ctx.controller
    adaptation = controller in ("nac", "sl-classical")
    if controller == "ctc-rls":
        controller = "ctc-fixed"
    return ClosedLoop(
        ctx.model, ctx.gains, traj, controller, adaptation=adaptation,
        theta_hat_fixed=ctx.theta_prior,
    )


def propagate_components(ctx: EvalContext, d, theta_bars, Qs,
                         fd_step: float = 1e-6) -> list:
    """Closed-loop moment propagation for a batch of prior components."""
    traj = ctx.make_traj(d)
    loop = _propagation_loop(ctx, traj)
    qd0, dqd0, _ = traj.eval(0.0)

    def rhs(t, Z, Th):
        dz, aux = loop.rhs(t, Z, Th, with_aux=True)
        return dz, aux["tau"]

    xi0 = loop.initial_state(qd0, dqd0, ctx.theta_prior)
    K = int(round(ctx.duration / ctx.dt))
    tgrid = np.arange(K + 1) * ctx.dt
    return propagate_moments_batch(
        rhs, xi0, theta_bars, Qs, tgrid, fd_step=fd_step,
        divergence_limit=1e6,
    )


def propagate_component(ctx: EvalContext, d, theta_bar_i, Q_i,
                        fd_step: float = 1e-6) -> MomentTrajectory:
    """Closed-loop moment propagation for one prior component."""
    theta_bar_i = np.asarray(theta_bar_i, dtype=float)
    Q_i = np.asarray(Q_i, dtype=float)
    return propagate_components(
        ctx, d, theta_bar_i[None], Q_i[None], fd_step=fd_step
    )[0]


def _component_expected_cost(ctx: EvalContext, mt: MomentTrajectory) -> float:
    if mt.diverged:
        frac = 0.0 if mt.t_divergence is None else mt.t_divergence / ctx.duration
        return ctx.cost_cap * (2.0 - frac)
    n = ctx.model.n_links
    cost = ctx.cost
    q_mu = mt.mu[:, :n]
    dq_mu = mt.mu[:, n:2 * n]
    Sxx = mt.sigma_xx(2 * n)

    mean_term = float(cost.terminal(ctx.model, q_mu[-1], dq_mu[-1]))
    mean_run = cost.running(q_mu, mt.tau_mean)
    mean_term += float(np.trapezoid(mean_run, mt.t))

    M = cost.terminal_hessian(ctx.model, q_mu[-1], dq_mu[-1])
    trace_term = 0.5 * float(np.trace(Sxx[-1] @ M))
    Hx = cost.running_hessian_x(q_mu)
    Hu = cost.running_hessian_u(n)
    run_tr = (
        np.einsum("kij,kji->k", Sxx, Hx)
        + np.einsum("kij,ji->k", mt.Sigma_uu, Hu)
    )
    trace_term += 0.5 * float(np.trapezoid(run_tr, mt.t))
    return mean_term + trace_term


def second_order_expectation(
    mt: MomentTrajectory, terminal, terminal_hessian,
    running=None, running_hessian=None, n_x: int = None,
) -> float:
    """E[terminal + integral of running] from propagated moments.

    terminal maps the mean state block to a scalar; terminal_hessian is
    its constant Hessian.  Optional running cost likewise.  Used directly
    for problems whose cost is an explicit quadratic of the state.
    """
    n_x = mt.n_xi if n_x is None else n_x
    Sxx = mt.sigma_xx(n_x)
    val = float(terminal(mt.mu[-1, :n_x]))
    val += 0.5 * float(np.trace(Sxx[-1] @ np.atleast_2d(terminal_hessian)))
    if running is not None:
        r = np.array([running(mu[:n_x]) for mu in mt.mu], dtype=float)
        if running_hessian is not None:
            H = np.atleast_2d(running_hessian)
            r = r + 0.5 * np.einsum("kij,ji->k", Sxx, H)
        val += float(np.trapezoid(r, mt.t))
    return val


def j_dual1(d, gmm: GaussianMixture, ctx: EvalContext,
            fd_step: float = 1e-6) -> float:
    """Robust expected cost: second-order expansion per mixture component.

    For each component the truth is distributed around the component mean
    while the controller starts from the global prior mean; the expected
    cost is the mean-trajectory cost plus trace corrections through the
    exact Hessians of the quadratic cost.
    """
    mts = propagate_components(ctx, d, gmm.means, gmm.covs, fd_step=fd_step)
    return sum(
        float(c) * _component_expected_cost(ctx, mt)
        for c, mt in zip(gmm.weights, mts)
    )


# ---------------------------------------------------------------------------
# optimality loss


@dataclass(frozen=True)
class OptimalityLossModel:
    """Quadratic model of the cost of designing for the wrong parameters.

    D maps a parameter error to the loss incurred by committing to the
    design that is optimal for the erroneous value: loss ~ 0.5 e^T D e.
    """

    D: np.ndarray
    d_star: np.ndarray
    theta_bar: np.ndarray
    damping: float
    converged: bool = True

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float)
        if np.any(np.abs(D - D.T) > 1e-9 * max(1.0, np.abs(D).max())):
            raise ObjectiveError("loss matrix must be symmetric")
        object.__setattr__(self, "D", 0.5 * (D + D.T))


def optimality_loss_model(
    theta_bar,
    ctx: EvalContext,
    opt_cfg: OptimizerConfig,
    d0=None,
    hess_step: float = 1e-4,
    cost_fn=None,
) -> OptimalityLossModel:
    """Second-order sensitivity of the optimal design to the parameters.

    Minimizes the deterministic cost at theta_bar, then builds the design
    Hessian and the mixed design-parameter block by finite differences at
    the optimum; the loss matrix follows from the implicit dependence of
    the optimal design on the parameters, with scale-aware Tikhonov
    damping of the design Hessian.
    """
    theta_bar = np.asarray(theta_bar, dtype=float)
    if cost_fn is None:
        cost_fn = lambda d, th: ctx.cost_of(d, th, theta_hat0=th)
    if d0 is None:
        from .reference import straight_line_design
        d0 = straight_line_design(ctx.q0, ctx.qT, ctx.spline)
    res = optimize(lambda d: cost_fn(d, theta_bar), d0, opt_cfg)
    d_star = res.d

    Hdd = fd_hessian_block(cost_fn, d_star, theta_bar, "dd", step=hess_step)
    Hdt = fd_hessian_block(cost_fn, d_star, theta_bar, "dtheta", step=hess_step)
    n_d = d_star.size
    lam = 1e-6 * np.trace(Hdd) / n_d
    if not np.isfinite(lam) or lam <= 0:
        lam = 1e-8
    H = Hdd + lam * np.eye(n_d)
    w = np.linalg.eigvalsh(H)
    if np.min(w) <= 0:
        # damp up to a PD design Hessian and report via the converged flag
        lam = lam - np.min(w) + 1e-8 * max(np.max(np.abs(w)), 1.0)
        H = Hdd + lam * np.eye(n_d)
    try:
        D = Hdt.T @ np.linalg.solve(H, Hdt)
    except np.linalg.LinAlgError as exc:
        raise ObjectiveError("design Hessian singular beyond damping") from exc
    return OptimalityLossModel(
        D=D, d_star=d_star, theta_bar=theta_bar, damping=float(lam),
        converged=bool(res.converged),
    )


def posterior_parameter_cov(info_matrix, Q) -> np.ndarray:
    """(I + Q^-1)^-1 written so that singular priors stay well-defined."""
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    S = np.linalg.solve(Q @ info_matrix + np.eye(n), Q)
    return 0.5 * (S + S.T)


# linear map from the 6 free entries of the symmetric pseudo-inertia
# estimate to the payload block (m, h_x, h_y, I)
_VECH_TO_THETA = np.array([
    [1.0, 0, 0, 0, 0, 0],
    [0, 1.0, 0, 0, 0, 0],
    [0, 0, 1.0, 0, 0, 0],
    [0, 0, 0, 1.0, 0, 1.0],
])


def _estimate_cov_from_uq(ctx: EvalContext, mt: MomentTrajectory) -> np.ndarray:
    n_x = 2 * ctx.model.n_links
    S = mt.Sigma[-1, n_x:mt.n_xi, n_x:mt.n_xi]
    if ctx.controller == "nac":
        return _VECH_TO_THETA @ S @ _VECH_TO_THETA.T
    if ctx.controller == "sl-classical":
        return S
    raise ObjectiveError(
        "propagated estimate covariance needs a continuous estimator"
    )


def j_dual2(d, gmm: GaussianMixture, olm: OptimalityLossModel,
            ctx: EvalContext, sigma_mode: str = "posterior") -> float:
    """Task cost plus the expected optimality loss of the post-run estimate.

    sigma_mode "posterior": parameter covariance after the run from the
    information integral against the prior.  sigma_mode "propagated":
    covariance of the adaptive estimate from the closed-loop moment
    propagation.
    """
    if sigma_mode not in ("posterior", "propagated"):
        raise ObjectiveError(f"unknown sigma_mode {sigma_mode!r}")
    total = 0.0
    for c, mu_i, Q_i in zip(gmm.weights, gmm.means, gmm.covs):
        log = ctx.run(d, mu_i)
        J = task_cost(log, ctx.cost, ctx.model, cap=ctx.cost_cap)
        if log.diverged:
            total += float(c) * J
            continue
        if sigma_mode == "posterior":
            info = fisher_information(log, ctx.fi_noise_cov)
            S_th = posterior_parameter_cov(info.I, Q_i)
        else:
            mt = propagate_component(ctx, d, mu_i, Q_i)
            S_th = _estimate_cov_from_uq(ctx, mt)
        total += float(c) * (J + 0.5 * float(np.trace(olm.D @ S_th)))
    return total
