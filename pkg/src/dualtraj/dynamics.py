"""Analytical dynamics of an n-link planar revolute manipulator with payload.

All inertial quantities enter linearly through per-body parameter blocks
(m, h_x, h_y, I) where h = m*c is the first moment in the body frame and
I is the rotational inertia about the body-frame origin.  Link i carries a
frame at joint i with the x-axis along the link; the payload is a separate
body rigidly attached at the end-effector with the orientation of the last
link.  Every public operation supports batched configurations (leading
dimensions broadcast).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

PARAMS_PER_BODY = 4


class DynamicsError(ValueError):
    """Raised for dimension mismatches or non-physical inputs."""


@dataclass(frozen=True)
class InertialParams:
    """Per-body inertial parameter blocks, stacked as an (n_bodies, 4) array.

    Each row is (m, h_x, h_y, I) with h = m*c.  The flat concatenation of
    rows is the parameter vector the dynamics are linear in.
    """

    blocks: np.ndarray

    def __post_init__(self):
        blocks = np.atleast_2d(np.asarray(self.blocks, dtype=float))
        if blocks.ndim != 2 or blocks.shape[1] != PARAMS_PER_BODY:
            raise DynamicsError(f"blocks must be (n_bodies, 4), got {blocks.shape}")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_mass_com_inertia(cls, masses, coms, inertias_com) -> "InertialParams":
        """Build blocks from masses, CoM offsets and inertias about the CoM."""
        m = np.atleast_1d(np.asarray(masses, dtype=float))
        c = np.atleast_2d(np.asarray(coms, dtype=float))
        i_com = np.atleast_1d(np.asarray(inertias_com, dtype=float))
        h = m[:, None] * c
        i_origin = i_com + m * np.sum(c**2, axis=1)
        return cls(np.column_stack([m, h, i_origin]))

    @property
    def n_bodies(self) -> int:
        return self.blocks.shape[0]

    @property
    def theta(self) -> np.ndarray:
        """Flat parameter vector (n_bodies * 4,)."""
        return self.blocks.reshape(-1)

    @property
    def masses(self) -> np.ndarray:
        return self.blocks[:, 0]

    @property
    def coms(self) -> np.ndarray:
        return self.blocks[:, 1:3] / self.blocks[:, 0:1]

    @property
    def inertias_com(self) -> np.ndarray:
        """Rotational inertia about each body's CoM (parallel-axis shift)."""
        m, h, i_o = self.blocks[:, 0], self.blocks[:, 1:3], self.blocks[:, 3]
        return i_o - np.sum(h**2, axis=1) / m

    def is_consistent(self, margin: float = 0.0) -> bool:
        return bool(np.all(consistency_gap(self.blocks) >= margin))


def consistency_gap(blocks) -> np.ndarray:
    """Physical-consistency margin per block: min(m, I, I - |h|^2/m)."""
    blocks = np.asarray(blocks, dtype=float)
    m, hx, hy, izz = (blocks[..., i] for i in range(4))
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = izz - (hx**2 + hy**2) / m
    return np.minimum(np.minimum(m, izz), np.where(m > 0, gap, -np.inf))


@dataclass(frozen=True)
class JointState:
    """Joint positions and velocities."""

    q: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        dq = np.asarray(self.dq, dtype=float)
        if q.shape != dq.shape:
            raise DynamicsError(f"q and dq shapes differ: {q.shape} vs {dq.shape}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "dq", dq)


@dataclass(frozen=True)
class ManipulatorModel:
    """Planar revolute chain: geometry, gravity and known link parameters."""

    link_lengths: np.ndarray
    gravity: np.ndarray
    robot_params: InertialParams
    joint_damping: np.ndarray = None

    def __post_init__(self):
        lengths = np.atleast_1d(np.asarray(self.link_lengths, dtype=float))
        if lengths.ndim != 1 or lengths.size < 1:
            raise DynamicsError("link_lengths must be a non-empty 1-D vector")
        if np.any(lengths <= 0):
            raise DynamicsError("link lengths must be strictly positive")
        gravity = np.asarray(self.gravity, dtype=float)
        if gravity.shape != (2,):
            raise DynamicsError("gravity must be a 2-vector")
        if self.robot_params.n_bodies != lengths.size:
            raise DynamicsError(
                f"robot_params has {self.robot_params.n_bodies} blocks, "
                f"expected {lengths.size}"
            )
        damping = self.joint_damping
        damping = np.zeros(lengths.size) if damping is None else np.atleast_1d(
            np.asarray(damping, dtype=float)
        )
        if damping.shape != lengths.shape:
            raise DynamicsError("joint_damping must match n_links")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "gravity", gravity)
        object.__setattr__(self, "joint_damping", damping)

    @property
    def n_links(self) -> int:
        return self.link_lengths.size

    @property
    def n_params(self) -> int:
        """Length of the full parameter vector (robot links + payload)."""
        return PARAMS_PER_BODY * (self.n_links + 1)

    def full_theta(self, payload: InertialParams) -> np.ndarray:
        if payload.n_bodies != 1:
            raise DynamicsError("payload must be a single parameter block")
        return np.concatenate([self.robot_params.theta, payload.theta])


# ---------------------------------------------------------------------------
# parameter-basis kinematics: everything below returns arrays whose
# contraction with the flat parameter vector yields the physical quantity


def _check_q(model: ManipulatorModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != model.n_links:
        raise DynamicsError(f"expected {model.n_links} joints, got {q.shape[-1]}")
    if not np.all(np.isfinite(q)):
        raise DynamicsError("non-finite joint values")
    return q


def _flatten(q: np.ndarray, n: int):
    lead = q.shape[:-1]
    return q.reshape(-1, n), lead


def mass_basis(model: ManipulatorModel, q) -> np.ndarray:
    """Per-parameter mass-matrix contributions, shape (..., n_params, n, n)."""
    q = _check_q(model, q)
    n = model.n_links
    q2d, lead = _flatten(q, n)
    out = _kernels.mass_basis_nb(model.link_lengths, q2d)
    return out.reshape(lead + (model.n_params, n, n))


def gravity_basis(model: ManipulatorModel, q) -> np.ndarray:
    """Per-parameter gravity-torque contributions, shape (..., n_params, n)."""
    q = _check_q(model, q)
    n = model.n_links
    q2d, lead = _flatten(q, n)
    gx, gy = model.gravity
    out = _kernels.gravity_basis_nb(model.link_lengths, gx, gy, q2d)
    return out.reshape(lead + (model.n_params, n))


def dynamics_basis(model: ManipulatorModel, q, dq):
    """Fused (mass, Coriolis, gravity) bases for a batch of states.

    Contracting each with a flat parameter vector yields M(q), C(q, dq)
    and g(q).  This is the workhorse of the closed-loop simulation: one
    call serves the plant, the controller and the regressor.
    """
    q = _check_q(model, q)
    dq = np.asarray(dq, dtype=float)
    n = model.n_links
    q2d, lead = _flatten(q, n)
    dq2d, _ = _flatten(dq, n)
    gx, gy = model.gravity
    Mb, Cb, gb = _kernels.dynamics_basis_nb(model.link_lengths, gx, gy, q2d, dq2d)
    P = model.n_params
    return (
        Mb.reshape(lead + (P, n, n)),
        Cb.reshape(lead + (P, n, n)),
        gb.reshape(lead + (P, n)),
    )


def potential_basis(model: ManipulatorModel, q) -> np.ndarray:
    """Per-parameter potential energy, shape (..., n_params)."""
    q = _check_q(model, q)
    lengths = model.link_lengths
    n = lengths.size
    gx, gy = model.gravity
    phi = np.cumsum(q, axis=-1)
    c, s = np.cos(phi), np.sin(phi)
    link_ends = np.cumsum(
        np.stack([lengths * c, lengths * s], axis=-1), axis=-2
    )  # (..., n, 2)
    origins = np.concatenate(
        [np.zeros(q.shape[:-1] + (1, 2)), link_ends], axis=-2
    )  # frames of bodies 0..n
    cb = np.concatenate([c, c[..., -1:]], axis=-1)
    sb = np.concatenate([s, s[..., -1:]], axis=-1)
    ub = np.zeros(q.shape[:-1] + (n + 1, 4))
    ub[..., 0] = -(gx * origins[..., 0] + gy * origins[..., 1])
    ub[..., 1] = -(gx * cb + gy * sb)
    ub[..., 2] = -(-gx * sb + gy * cb)
    return ub.reshape(q.shape[:-1] + (model.n_params,))


def coriolis_basis(model: ManipulatorModel, q, dq) -> np.ndarray:
    """Per-parameter Coriolis-matrix contributions via Christoffel symbols.

    dM/dq by central finite differences of the mass basis; the resulting C
    satisfies the skew-symmetry of (dM/dt - 2C) to finite-difference accuracy.
    """
    q = _check_q(model, q)
    dq = np.asarray(dq, dtype=float)
    n = model.n_links
    q2d, lead = _flatten(q, n)
    dq2d, _ = _flatten(dq, n)
    out = _kernels.coriolis_basis_nb(model.link_lengths, q2d, dq2d)
    return out.reshape(lead + (model.n_params, n, n))


# ---------------------------------------------------------------------------
# public operations


def dynamics_terms(model: ManipulatorModel, payload: InertialParams, state: JointState):
    """Mass matrix, Coriolis matrix and gravity torque at the given state."""
    theta = model.full_theta(payload)
    q, dq = state.q, state.dq
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(dq))):
        raise DynamicsError("non-finite state")
    M = np.einsum("...pij,p->...ij", mass_basis(model, q), theta)
    C = np.einsum("...pij,p->...ij", coriolis_basis(model, q, dq), theta)
    g = np.einsum("...pi,p->...i", gravity_basis(model, q), theta)
    return M, C, g


def inverse_dynamics(model, payload, state: JointState, ddq) -> np.ndarray:
    """Torque realizing ddq at the given state: M*ddq + C*dq + g (+ damping)."""
    ddq = np.asarray(ddq, dtype=float)
    if ddq.shape[-1] != model.n_links:
        raise DynamicsError("ddq dimension mismatch")
    M, C, g = dynamics_terms(model, payload, state)
    tau = (
        np.einsum("...ij,...j->...i", M, ddq)
        + np.einsum("...ij,...j->...i", C, state.dq)
        + g
    )
    return tau + model.joint_damping * state.dq


def forward_dynamics(model, payload, state: JointState, tau) -> np.ndarray:
    """Joint accelerations from applied torque."""
    tau = np.asarray(tau, dtype=float)
    if tau.shape[-1] != model.n_links:
        raise DynamicsError("tau dimension mismatch")
    M, C, g = dynamics_terms(model, payload, state)
    rhs = tau - np.einsum("...ij,...j->...i", C, state.dq) - g
    rhs = rhs - model.joint_damping * state.dq
    try:
        return np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise DynamicsError("mass matrix numerically singular") from exc


def regressor(model: ManipulatorModel, state: JointState, a, v) -> np.ndarray:
    """Regressor Y(q, dq, a, v) with Y @ theta = M(q) a + C(q, dq) v + g(q).

    Columns are ordered as the flat parameter vector: robot blocks first,
    payload block last, so Y[:, :-4] and Y[:, -4:] are the robot/payload
    partitions.
    """
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    if a.shape[-1] != model.n_links or v.shape[-1] != model.n_links:
        raise DynamicsError("a/v dimension mismatch")
    q, dq = state.q, state.dq
    Y = (
        np.einsum("...pij,...j->...ip", mass_basis(model, q), a)
        + np.einsum("...pij,...j->...ip", coriolis_basis(model, q, dq), v)
        + np.swapaxes(gravity_basis(model, q), -1, -2)
    )
    return Y


def ee_position(model: ManipulatorModel, q) -> np.ndarray:
    """Planar position of the last link tip."""
    q = _check_q(model, q)
    phi = np.cumsum(q, axis=-1)
    x = np.sum(model.link_lengths * np.cos(phi), axis=-1)
    y = np.sum(model.link_lengths * np.sin(phi), axis=-1)
    return np.stack([x, y], axis=-1)


def ee_jacobian(model: ManipulatorModel, q) -> np.ndarray:
    """Jacobian of ee_position, shape (..., 2, n)."""
    q = _check_q(model, q)
    phi = np.cumsum(q, axis=-1)
    w = np.stack(
        [-model.link_lengths * np.sin(phi), model.link_lengths * np.cos(phi)], axis=-1
    )
    tail = np.flip(np.cumsum(np.flip(w, axis=-2), axis=-2), axis=-2)  # (..., n, 2)
    return np.swapaxes(tail, -1, -2)


def ee_hessian(model: ManipulatorModel, q) -> np.ndarray:
    """Second derivative of ee_position, shape (..., 2, n, n)."""
    q = _check_q(model, q)
    n = model.n_links
    phi = np.cumsum(q, axis=-1)
    u = np.stack(
        [model.link_lengths * np.cos(phi), model.link_lengths * np.sin(phi)], axis=-1
    )
    tail = np.flip(np.cumsum(np.flip(u, axis=-2), axis=-2), axis=-2)
    k = np.arange(n)
    hi = np.maximum(k[:, None], k[None, :])
    H = -tail[..., hi, :]  # (..., n, n, 2)
    return np.moveaxis(H, -1, -3)


def ik_solve(model: ManipulatorModel, target, q_seed=None, tol=1e-10, max_iter=200):
    """Damped Newton inverse kinematics for a planar target position."""
    target = np.asarray(target, dtype=float)
    reach = float(np.sum(model.link_lengths))
    if np.linalg.norm(target) > reach:
        raise DynamicsError(f"target {target} outside workspace radius {reach}")
    q = np.full(model.n_links, 0.3) if q_seed is None else np.array(q_seed, dtype=float)
    lam = 1e-6
    for _ in range(max_iter):
        err = ee_position(model, q) - target
        if np.linalg.norm(err) < tol:
            return q
        J = ee_jacobian(model, q)
        JJ = J.T @ J + lam * np.eye(model.n_links)
        q = q - np.linalg.solve(JJ, J.T @ err)
    raise DynamicsError("inverse kinematics did not converge")


def total_energy(model, payload, state: JointState) -> float:
    """Kinetic plus potential energy (conservation diagnostic)."""
    theta = model.full_theta(payload)
    M = np.einsum("...pij,p->...ij", mass_basis(model, state.q), theta)
    kin = 0.5 * np.einsum("...i,...ij,...j->...", state.dq, M, state.dq)
    pot = np.einsum("...p,p->...", potential_basis(model, state.q), theta)
    return kin + pot
