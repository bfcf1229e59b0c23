"""Feedback policies and adaptation laws for the structured closed loop.

Three torque policies are provided: a passivity-based sliding controller
(with either the manifold adaptation law or the classical gain law) and a
computed-torque controller (with recursive least squares or frozen
parameters).  Only the payload parameter block is adapted; the robot link
parameters are treated as known.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import (
    DynamicsError,
    InertialParams,
    JointState,
    ManipulatorModel,
    dynamics_basis,
)


class ControlError(ValueError):
    """Raised for invalid gains or corrupted estimator state."""


def _pos_diag(vec, n, name):
    vec = np.atleast_1d(np.asarray(vec, dtype=float))
    if vec.size == 1:
        vec = np.full(n, vec[0])
    if vec.shape != (n,) or np.any(vec <= 0):
        raise ControlError(f"{name} must be a positive diagonal of size {n}")
    return vec


@dataclass(frozen=True)
class ControllerGains:
    """Gains for both policies and all adaptation laws."""

    n_joints: int
    K: np.ndarray = 15.0          # sliding feedback, diagonal
    Lam: np.ndarray = 5.0         # sliding-variable slope, diagonal
    Kp: np.ndarray = 100.0        # computed-torque stiffness, diagonal
    Kd: np.ndarray = 20.0         # computed-torque damping, diagonal
    gamma: float = 1.0            # manifold adaptation gain
    Gamma: np.ndarray = None      # classical adaptation gain, 4x4 PD
    rls_prior_cov: np.ndarray = None   # 4x4 PD
    rls_noise_cov: np.ndarray = None   # n x n PD

    def __post_init__(self):
        n = self.n_joints
        object.__setattr__(self, "K", _pos_diag(self.K, n, "K"))
        object.__setattr__(self, "Lam", _pos_diag(self.Lam, n, "Lam"))
        object.__setattr__(self, "Kp", _pos_diag(self.Kp, n, "Kp"))
        object.__setattr__(self, "Kd", _pos_diag(self.Kd, n, "Kd"))
        if self.gamma <= 0:
            raise ControlError("gamma must be positive")
        for name, mat, size in (
            ("Gamma", self.Gamma, 4),
            ("rls_prior_cov", self.rls_prior_cov, 4),
            ("rls_noise_cov", self.rls_noise_cov, n),
        ):
            if mat is None:
                continue
            mat = np.asarray(mat, dtype=float)
            if mat.ndim == 1:
                mat = np.diag(mat)
            if mat.shape != (size, size):
                raise ControlError(f"{name} must be {size}x{size}")
            if np.any(np.linalg.eigvalsh(0.5 * (mat + mat.T)) <= 0):
                raise ControlError(f"{name} must be positive definite")
            object.__setattr__(self, name, mat)


@dataclass(frozen=True)
class EstimatorState:
    """Payload estimate plus whatever side state the adaptation law carries."""

    theta_hat: np.ndarray           # payload block (m, h_x, h_y, I)
    P: np.ndarray = None            # RLS covariance, 4x4

    def __post_init__(self):
        theta = np.asarray(self.theta_hat, dtype=float)
        if theta.shape != (4,):
            raise ControlError("theta_hat must be a 4-vector")
        object.__setattr__(self, "theta_hat", theta)
        if self.P is not None:
            P = np.asarray(self.P, dtype=float)
            if P.shape != (4, 4):
                raise ControlError("P must be 4x4")
            if np.any(np.linalg.eigvalsh(0.5 * (P + P.T)) <= 0):
                raise ControlError("P must be positive definite")
            object.__setattr__(self, "P", P)


# ---------------------------------------------------------------------------
# pseudo-inertia parametrization for the manifold adaptation law


def pseudo_inertia(theta) -> np.ndarray:
    """Linear map from (m, h_x, h_y, I) to the 3x3 pseudo-inertia matrix.

    The lower block carries I/2 on its diagonal so the trace recovers the
    rotational inertia; positive definiteness of the result implies (and is
    stricter than) the planar consistency inequality I >= |h|^2/m.
    """
    theta = np.asarray(theta, dtype=float)
    m, hx, hy, izz = (theta[..., i] for i in range(4))
    out = np.zeros(theta.shape[:-1] + (3, 3))
    out[..., 0, 0] = m
    out[..., 0, 1] = out[..., 1, 0] = hx
    out[..., 0, 2] = out[..., 2, 0] = hy
    out[..., 1, 1] = out[..., 2, 2] = 0.5 * izz
    return out


def pseudo_inertia_inverse(Theta) -> np.ndarray:
    """Inverse of pseudo_inertia on symmetric matrices of its image form."""
    Theta = np.asarray(Theta, dtype=float)
    return np.stack(
        [
            Theta[..., 0, 0],
            Theta[..., 0, 1],
            Theta[..., 0, 2],
            Theta[..., 1, 1] + Theta[..., 2, 2],
        ],
        axis=-1,
    )


def torque_dual(l) -> np.ndarray:
    """Dual of pseudo_inertia: tr(pseudo_inertia(theta) @ torque_dual(l)) = theta . l."""
    l = np.asarray(l, dtype=float)
    out = np.zeros(l.shape[:-1] + (3, 3))
    out[..., 0, 0] = l[..., 0]
    out[..., 0, 1] = out[..., 1, 0] = 0.5 * l[..., 1]
    out[..., 0, 2] = out[..., 2, 0] = 0.5 * l[..., 2]
    out[..., 1, 1] = out[..., 2, 2] = l[..., 3]
    return out


def nac_update(gains: ControllerGains, Theta_hat, Y_l, s) -> np.ndarray:
    """Time derivative of the pseudo-inertia estimate on the PD manifold."""
    Theta_hat = np.asarray(Theta_hat, dtype=float)
    if Theta_hat.ndim == 2 and np.any(np.linalg.eigvalsh(Theta_hat) <= 0):
        raise ControlError("pseudo-inertia estimate lost positive definiteness")
    l = np.einsum("...ip,...i->...p", np.asarray(Y_l, dtype=float), s)
    L = torque_dual(l)
    dTheta = -(1.0 / gains.gamma) * (Theta_hat @ L @ Theta_hat)
    return 0.5 * (dTheta + np.swapaxes(dTheta, -1, -2))


def classical_update(gains: ControllerGains, Y_l, s) -> np.ndarray:
    """Classical gradient adaptation for the payload block."""
    if gains.Gamma is None:
        raise ControlError("classical adaptation requires Gamma")
    l = np.einsum("...ip,...i->...p", np.asarray(Y_l, dtype=float), s)
    return -np.einsum("pq,...q->...p", gains.Gamma, l)


# ---------------------------------------------------------------------------
# torque policies


def _ref_errors(state: JointState, ref):
    q_d, dq_d, ddq_d = ref
    qe = state.q - q_d
    dqe = state.dq - dq_d
    return q_d, dq_d, ddq_d, qe, dqe


def _full_theta_hat(model: ManipulatorModel, theta_hat):
    theta_hat = np.asarray(theta_hat, dtype=float)
    robot = np.broadcast_to(
        model.robot_params.theta, theta_hat.shape[:-1] + (4 * model.n_links,)
    )
    return np.concatenate([robot, theta_hat], axis=-1)


def sliding_terms(model, gains, state: JointState, ref, bases=None):
    """Regressor Y(q, dq, a, v) and sliding variable s of the sliding policy."""
    _, _, ddq_d, qe, dqe = _ref_errors(state, ref)
    a = ddq_d - gains.Lam * dqe
    v = state.dq - (dqe + gains.Lam * qe)
    s = state.dq - v
    Mb, Cb, gb = bases if bases is not None else dynamics_basis(
        model, state.q, state.dq
    )
    Y = (
        np.einsum("...pij,...j->...ip", Mb, a)
        + np.einsum("...pij,...j->...ip", Cb, v)
        + np.swapaxes(gb, -1, -2)
    )
    return Y, s


def slotine_li_torque(model, gains, state: JointState, ref, theta_hat, bases=None):
    """Sliding adaptive policy: feedforward on the estimate, -K s feedback.

    Known viscous joint damping is cancelled exactly so the textbook
    stability argument applies unchanged.
    """
    Y, s = sliding_terms(model, gains, state, ref, bases)
    theta_full = _full_theta_hat(model, theta_hat)
    return (
        np.einsum("...ip,...p->...i", Y, theta_full)
        - gains.K * s
        + model.joint_damping * state.dq
    )


def ctc_torque(model, gains, state: JointState, ref, theta_hat, bases=None):
    """Computed-torque policy with estimate-based model terms."""
    _, _, ddq_d, qe, dqe = _ref_errors(state, ref)
    Mb, Cb, gb = bases if bases is not None else dynamics_basis(
        model, state.q, state.dq
    )
    theta_full = _full_theta_hat(model, theta_hat)
    M = np.einsum("...pij,...p->...ij", Mb, theta_full)
    a = ddq_d - gains.Kd * dqe - gains.Kp * qe
    return (
        np.einsum("...ij,...j->...i", M, a)
        + np.einsum("...pij,...p,...j->...i", Cb, theta_full, state.dq)
        + np.einsum("...pi,...p->...i", gb, theta_full)
        + model.joint_damping * state.dq
    )


# ---------------------------------------------------------------------------
# recursive least squares


def rls_update(
    est: EstimatorState, Y_l, residual, noise_cov, project_consistent: bool = False
) -> EstimatorState:
    """Covariance-form RLS step on the payload block.

    residual is the measured torque minus the known-robot regressor part;
    the model is residual = Y_l @ theta_l + noise.
    """
    Y_l = np.atleast_2d(np.asarray(Y_l, dtype=float))
    residual = np.atleast_1d(np.asarray(residual, dtype=float))
    R = np.asarray(noise_cov, dtype=float)
    if R.ndim == 0:
        R = np.eye(Y_l.shape[0]) * R
    elif R.ndim == 1:
        R = np.diag(R)
    P = est.P
    if P is None:
        raise ControlError("estimator state carries no covariance")
    S = Y_l @ P @ Y_l.T + R
    try:
        G = np.linalg.solve(S.T, (P @ Y_l.T).T).T
    except np.linalg.LinAlgError as exc:
        raise ControlError("innovation covariance singular") from exc
    theta = est.theta_hat + G @ (residual - Y_l @ est.theta_hat)
    P_new = (np.eye(4) - G @ Y_l) @ P
    P_new = 0.5 * (P_new + P_new.T)
    if project_consistent:
        theta = project_payload(theta)
    return EstimatorState(theta_hat=theta, P=P_new)


def rls_fixed_gain_update(est: EstimatorState, gain, Y_l, residual) -> EstimatorState:
    """Fixed-gain variant kept for fidelity experiments."""
    Y_l = np.atleast_2d(np.asarray(Y_l, dtype=float))
    residual = np.atleast_1d(np.asarray(residual, dtype=float))
    theta = est.theta_hat + np.asarray(gain) @ (residual - Y_l @ est.theta_hat)
    return replace(est, theta_hat=theta)


def project_payload(theta, m_min=1e-3, margin=1e-6) -> np.ndarray:
    """Clip a payload block onto the physically consistent set."""
    m, hx, hy, izz = theta
    m = max(m, m_min)
    izz = max(izz, (hx**2 + hy**2) / m + margin, margin)
    return np.array([m, hx, hy, izz])
