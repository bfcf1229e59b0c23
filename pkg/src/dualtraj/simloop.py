"""Deterministic closed-loop simulation: plant, policy and adaptation law.

The coupled ODE (plant state plus any continuous estimator state) is
integrated with fixed-step RK4; the policy and adaptation law are evaluated
at every integrator stage.  Recursive least squares is a discrete update
applied between integrator steps.  Everything is batchable over a leading
sample dimension, which serves both Monte-Carlo validation and the
finite-difference linearizations of the uncertainty propagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import control, dynamics
from .control import ControllerGains, EstimatorState
from .dynamics import InertialParams, JointState, ManipulatorModel
from .reference import BSplineTrajectory

CONTROLLERS = ("nac", "sl-classical", "ctc-rls", "ctc-fixed")


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    duration: float = 3.0
    dt: float = 1e-3
    controller: str = "nac"
    adaptation: bool = True
    torque_noise_cov: float = 0.0   # continuous-time residual noise intensity
    rls_update_every: int = 1
    rls_fixed_gain: np.ndarray = None
    seed: int = 0
    divergence_limit: float = 1e6
    cost_cap: float = 1e6

    def __post_init__(self):
        if self.dt <= 0 or self.duration <= 0:
            raise SimulationError("duration and dt must be positive")
        steps = self.duration / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise SimulationError("duration must be an integral number of steps")
        if self.controller not in CONTROLLERS:
            raise SimulationError(f"unknown controller {self.controller!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass
class RolloutLog:
    """Uniformly sampled record of one closed-loop execution."""

    t: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    ddq: np.ndarray
    tau: np.ndarray
    q_d: np.ndarray
    dq_d: np.ndarray
    ddq_d: np.ndarray
    theta_hat: np.ndarray
    s: np.ndarray
    Y_l: np.ndarray           # payload regressor columns at (q, dq, ddq)
    diverged: bool = False
    t_divergence: float = None
    controller: str = ""
    duration: float = 0.0

    def export_csv(self, path) -> None:
        n = self.q.shape[1]
        cols = [("t", self.t[:, None])]
        for name, arr in (
            ("q", self.q), ("dq", self.dq), ("ddq", self.ddq), ("tau", self.tau),
            ("qd", self.q_d), ("dqd", self.dq_d), ("ddqd", self.ddq_d),
            ("s", self.s),
        ):
            cols.append((name, arr))
        header = ["t"] + [
            f"{name}{i}" for name, arr in cols[1:] for i in range(n)
        ] + [f"th{i}" for i in range(4)]
        data = np.hstack([arr for _, arr in cols] + [self.theta_hat])
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in data:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


class ClosedLoop:
    """Batched right-hand side of the structured control system.

    The ODE state is z = (q, dq, est) where est is empty for the
    computed-torque controllers, the 4-vector payload estimate for the
    classical sliding law, and the 6 free entries of the symmetric
    pseudo-inertia estimate for the manifold law.
    """

    _VECH = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]

    def __init__(self, model, gains, traj, controller, adaptation=True,
                 theta_hat_fixed=None):
        if controller not in CONTROLLERS:
            raise SimulationError(f"unknown controller {controller!r}")
        self.model = model
        self.gains = gains
        self.traj = traj
        self.controller = controller
        self.adaptation = adaptation and controller not in ("ctc-fixed",)
        self.theta_hat_fixed = theta_hat_fixed
        n = model.n_links
        self.n_x = 2 * n
        if controller == "nac":
            self.n_est = 6
        elif controller == "sl-classical":
            self.n_est = 4
        else:
            self.n_est = 0
        self.n_z = self.n_x + self.n_est
        self._robot_theta = model.robot_params.theta

    # -- estimator-state packing ------------------------------------------

    def initial_state(self, q0, dq0, theta_hat0):
        q0 = np.asarray(q0, dtype=float)
        dq0 = np.asarray(dq0, dtype=float)
        parts = [q0, dq0]
        if self.controller == "nac":
            Theta = control.pseudo_inertia(theta_hat0)
            if np.any(np.linalg.eigvalsh(Theta) <= 0):
                raise SimulationError(
                    "initial payload estimate not in the PD cone of the "
                    "pseudo-inertia parametrization"
                )
            parts.append(self._vech(Theta))
        elif self.controller == "sl-classical":
            parts.append(np.asarray(theta_hat0, dtype=float))
        return np.concatenate(parts)

    def _vech(self, Theta):
        idx = self._VECH
        return np.stack([Theta[..., i, j] for i, j in idx], axis=-1)

    def _unvech(self, v):
        Theta = np.zeros(v.shape[:-1] + (3, 3))
        for k, (i, j) in enumerate(self._VECH):
            Theta[..., i, j] = v[..., k]
            Theta[..., j, i] = v[..., k]
        return Theta

    def theta_hat_of(self, z):
        """Payload estimate encoded in (or fixed alongside) the ODE state."""
        if self.controller == "nac":
            return control.pseudo_inertia_inverse(self._unvech(z[..., self.n_x:]))
        if self.controller == "sl-classical":
            return z[..., self.n_x:]
        fixed = np.asarray(self.theta_hat_fixed, dtype=float)
        return np.broadcast_to(fixed, z.shape[:-1] + (4,))

    # -- dynamics ----------------------------------------------------------

    def rhs(self, t, z, theta_l, ref=None, with_aux=False):
        """dz/dt for batched state z (..., n_z) and true payload (..., 4)."""
        model, gains = self.model, self.gains
        n = model.n_links
        q = z[..., :n]
        dq = z[..., n:2 * n]
        if ref is None:
            ref = self.traj.eval(t)
        bases = dynamics.dynamics_basis(model, q, dq)
        Mb, Cb, gb = bases
        theta_hat = self.theta_hat_of(z)
        state = JointState(q, dq)

        if self.controller in ("nac", "sl-classical"):
            Y, s = control.sliding_terms(model, gains, state, ref, bases)
            th_full_hat = np.concatenate(
                [np.broadcast_to(self._robot_theta, q.shape[:-1] + (4 * n,)),
                 theta_hat], axis=-1,
            )
            tau = (
                np.einsum("...ip,...p->...i", Y, th_full_hat)
                - gains.K * s
                + model.joint_damping * dq
            )
        else:
            tau = control.ctc_torque(model, gains, state, ref, theta_hat, bases)
            q_d, dq_d, _ = ref
            s = (dq - dq_d) + gains.Lam * (q - q_d)
            Y = None

        theta_full = np.concatenate(
            [np.broadcast_to(self._robot_theta, q.shape[:-1] + (4 * n,)),
             np.broadcast_to(theta_l, q.shape[:-1] + (4,))], axis=-1,
        )
        M = np.einsum("...pij,...p->...ij", Mb, theta_full)
        force = (
            tau
            - np.einsum("...pij,...p,...j->...i", Cb, theta_full, dq)
            - np.einsum("...pi,...p->...i", gb, theta_full)
            - model.joint_damping * dq
        )
        ddq = np.linalg.solve(M, force[..., None])[..., 0]

        parts = [dq, ddq]
        if self.n_est:
            if self.adaptation:
                Y_l = Y[..., -4:]
                if self.controller == "nac":
                    Theta = self._unvech(z[..., self.n_x:])
                    dTheta = control.nac_update(gains, Theta, Y_l, s)
                    parts.append(self._vech(dTheta))
                else:
                    parts.append(control.classical_update(gains, Y_l, s))
            else:
                parts.append(np.zeros(z.shape[:-1] + (self.n_est,)))
        dz = np.concatenate(parts, axis=-1)
        if with_aux:
            return dz, {"tau": tau, "s": s, "ddq": ddq, "theta_hat": theta_hat,
                        "bases": bases}
        return dz


def integrate(loop: ClosedLoop, z0, theta_l, tgrid, refs=None):
    """Fixed-step RK4 over tgrid; returns state history (..., K+1, n_z).

    refs may carry the precomputed reference at the 2K+1 stage times
    (tgrid interleaved with midpoints), avoiding repeated spline calls.
    """
    tgrid = np.asarray(tgrid, dtype=float)
    K = tgrid.size - 1
    if refs is None:
        stage_t = np.sort(np.concatenate([tgrid, 0.5 * (tgrid[:-1] + tgrid[1:])]))
        refs = loop.traj.eval(stage_t)
    out = np.empty(np.shape(z0)[:-1] + (K + 1, loop.n_z))
    z = np.asarray(z0, dtype=float)
    out[..., 0, :] = z
    ref_at = lambda i: tuple(r[i] for r in refs)
    for k in range(K):
        h = tgrid[k + 1] - tgrid[k]
        r0, rm, r1 = ref_at(2 * k), ref_at(2 * k + 1), ref_at(2 * k + 2)
        k1 = loop.rhs(tgrid[k], z, theta_l, ref=r0)
        k2 = loop.rhs(tgrid[k] + h / 2, z + h / 2 * k1, theta_l, ref=rm)
        k3 = loop.rhs(tgrid[k] + h / 2, z + h / 2 * k2, theta_l, ref=rm)
        k4 = loop.rhs(tgrid[k + 1], z + h * k3, theta_l, ref=r1)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[..., k + 1, :] = z
    return out


def rollout(
    model: ManipulatorModel,
    payload_true: InertialParams,
    traj: BSplineTrajectory,
    gains: ControllerGains,
    estimator_init: EstimatorState,
    cfg: SimConfig,
    q0=None,
    dq0=None,
) -> RolloutLog:
    """Simulate one closed-loop execution and record it on the step grid.

    The initial configuration defaults to the reference start at rest.
    Divergence (non-finite or exploding state) truncates the log and sets
    the diverged flag instead of raising.
    """
    n = model.n_links
    loop = ClosedLoop(
        model, gains, traj, cfg.controller, adaptation=cfg.adaptation,
        theta_hat_fixed=estimator_init.theta_hat,
    )
    qd0, dqd0, _ = traj.eval(0.0)
    q0 = qd0 if q0 is None else np.asarray(q0, dtype=float)
    dq0 = dqd0 if dq0 is None else np.asarray(dq0, dtype=float)
    z = loop.initial_state(q0, dq0, estimator_init.theta_hat)

    K = cfg.n_steps
    h = cfg.dt
    tgrid = np.arange(K + 1) * h
    stage_t = np.sort(np.concatenate([tgrid, tgrid[:-1] + h / 2]))
    refs = traj.eval(np.clip(stage_t, 0.0, traj.duration))
    theta_l = payload_true.theta

    rls_active = cfg.controller == "ctc-rls" and cfg.adaptation
    est = estimator_init
    rng = np.random.default_rng(cfg.seed)
    if rls_active:
        dt_upd = h * cfg.rls_update_every
        sig_meas = (
            np.sqrt(cfg.torque_noise_cov / dt_upd)
            if cfg.torque_noise_cov > 0 else 0.0
        )
        R_rls = (gains.rls_noise_cov if gains.rls_noise_cov is not None
                 else np.eye(n) * max(cfg.torque_noise_cov / dt_upd, 1e-8))

    logs = {k: [] for k in ("q", "dq", "ddq", "tau", "s", "theta_hat", "Y_l")}
    diverged = False
    t_div = None
    ref_at = lambda i: tuple(r[i] for r in refs)

    def regressor_of(aux, dq_now):
        # inverse-dynamics regressor at the realized motion
        Mb, Cb, gb = aux["bases"]
        return (
            np.einsum("pij,j->ip", Mb, aux["ddq"])
            + np.einsum("pij,j->ip", Cb, dq_now)
            + gb.T
        )

    def record(z, aux, Y_full):
        logs["q"].append(z[:n].copy())
        logs["dq"].append(z[n:2 * n].copy())
        logs["ddq"].append(aux["ddq"])
        logs["tau"].append(aux["tau"])
        logs["s"].append(aux["s"])
        logs["theta_hat"].append(np.array(aux["theta_hat"], dtype=float))
        logs["Y_l"].append(Y_full[:, -4:])

    for k in range(K + 1):
        try:
            if rls_active:
                loop.theta_hat_fixed = est.theta_hat
            k1, aux = loop.rhs(
                tgrid[k], z, theta_l, ref=ref_at(2 * k), with_aux=True
            )
            Y_full = regressor_of(aux, z[n:2 * n])
            if rls_active and k > 0 and k % cfg.rls_update_every == 0:
                tau_meas = aux["tau"]
                if sig_meas > 0:
                    tau_meas = tau_meas + sig_meas * rng.standard_normal(n)
                # known damping removed so the residual is Y_l theta_l + noise
                resid = (
                    tau_meas
                    - Y_full[:, :-4] @ model.robot_params.theta
                    - model.joint_damping * z[n:2 * n]
                )
                if cfg.rls_fixed_gain is not None:
                    est = control.rls_fixed_gain_update(
                        est, cfg.rls_fixed_gain, Y_full[:, -4:], resid
                    )
                else:
                    est = control.rls_update(est, Y_full[:, -4:], resid, R_rls)
                loop.theta_hat_fixed = est.theta_hat
                k1, aux = loop.rhs(
                    tgrid[k], z, theta_l, ref=ref_at(2 * k), with_aux=True
                )
            record(z, aux, Y_full)
            if k == K:
                break
            rm, r1 = ref_at(2 * k + 1), ref_at(2 * k + 2)
            k2 = loop.rhs(tgrid[k] + h / 2, z + h / 2 * k1, theta_l, ref=rm)
            k3 = loop.rhs(tgrid[k] + h / 2, z + h / 2 * k2, theta_l, ref=rm)
            k4 = loop.rhs(tgrid[k + 1], z + h * k3, theta_l, ref=r1)
            z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        except control.ControlError:
            # an estimate driven out of its admissible set counts as a
            # failed run, not a crash
            diverged = True
            t_div = tgrid[k]
            break
        if (not np.all(np.isfinite(z))) or np.max(np.abs(z)) > cfg.divergence_limit:
            diverged = True
            t_div = tgrid[k + 1]
            break

    n_rec = len(logs["q"])
    qd, dqd, ddqd = (r[::2][:n_rec] for r in refs)
    return RolloutLog(
        t=tgrid[:n_rec],
        q=np.array(logs["q"]),
        dq=np.array(logs["dq"]),
        ddq=np.array(logs["ddq"]),
        tau=np.array(logs["tau"]),
        q_d=qd, dq_d=dqd, ddq_d=ddqd,
        theta_hat=np.array(logs["theta_hat"]),
        s=np.array(logs["s"]),
        Y_l=np.array(logs["Y_l"]),
        diverged=diverged,
        t_divergence=t_div,
        controller=cfg.controller,
        duration=cfg.duration,
    )


# ---------------------------------------------------------------------------
# task cost


@dataclass(frozen=True)
class TaskCost:
    """Quadratic terminal cost on pose and rest, quadratic running cost."""

    p_target: np.ndarray
    w_pose: float = 200.0
    w_vel: float = 1.0
    w_torque: float = 1e-4
    q_limits: np.ndarray = None     # (n, 2) soft limits
    w_limit: float = 10.0

    def __post_init__(self):
        object.__setattr__(
            self, "p_target", np.asarray(self.p_target, dtype=float)
        )
        if self.q_limits is not None:
            object.__setattr__(
                self, "q_limits", np.asarray(self.q_limits, dtype=float)
            )

    def terminal(self, model, q, dq):
        err = dynamics.ee_position(model, q) - self.p_target
        return self.w_pose * np.sum(err**2, axis=-1) + self.w_vel * np.sum(
            dq**2, axis=-1
        )

    def running(self, q, tau):
        val = self.w_torque * np.sum(tau**2, axis=-1)
        if self.q_limits is not None:
            lo, hi = self.q_limits[:, 0], self.q_limits[:, 1]
            viol = np.maximum(lo - q, 0.0) + np.maximum(q - hi, 0.0)
            val = val + self.w_limit * np.sum(viol**2, axis=-1)
        return val

    # exact Hessians of the quadratic cost pieces, used by the
    # second-order expectation objective
    def terminal_hessian(self, model, q, dq):
        n = q.shape[-1]
        J = dynamics.ee_jacobian(model, q)
        H = dynamics.ee_hessian(model, q)
        err = dynamics.ee_position(model, q) - self.p_target
        Hq = 2.0 * self.w_pose * (
            np.einsum("...ci,...cj->...ij", J, J)
            + np.einsum("...c,...cij->...ij", err, H)
        )
        out = np.zeros(q.shape[:-1] + (2 * n, 2 * n))
        out[..., :n, :n] = Hq
        out[..., n:, n:] = 2.0 * self.w_vel * np.eye(n)
        return out

    def running_hessian_x(self, q):
        n = q.shape[-1]
        out = np.zeros(q.shape[:-1] + (2 * n, 2 * n))
        if self.q_limits is not None:
            lo, hi = self.q_limits[:, 0], self.q_limits[:, 1]
            active = (q < lo) | (q > hi)
            diag = 2.0 * self.w_limit * active.astype(float)
            out[..., :n, :n] = diag[..., None] * np.eye(n)
        return out

    def running_hessian_u(self, n):
        return 2.0 * self.w_torque * np.eye(n)


def task_cost(log: RolloutLog, cost: TaskCost, model: ManipulatorModel,
              cap: float = 1e6) -> float:
    """Terminal plus trapezoid-integrated running cost; capped on divergence."""
    if log.diverged:
        frac = 0.0 if log.t_divergence is None else log.t_divergence / log.duration
        return cap * (2.0 - frac)
    term = cost.terminal(model, log.q[-1], log.dq[-1])
    run = cost.running(log.q, log.tau)
    integral = np.trapezoid(run, log.t)
    return float(term + integral)
