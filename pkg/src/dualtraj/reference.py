"""B-spline joint-space reference trajectories.

A clamped B-spline in a normalized coordinate s in [0, 1] is composed with
a quintic time-scaling law s(t) whose first and second derivatives vanish
at both ends.  Boundary configurations are enforced by pinning the first
and last control points; zero end velocities and accelerations follow from
the time scaling regardless of the interior control points, which form the
design vector the optimizers act on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.interpolate import BSpline

_KNOT_MARGIN = 1e-3


class TrajectoryError(ValueError):
    """Raised for inconsistent spline dimensions or evaluation out of range."""


@dataclass(frozen=True)
class SplineConfig:
    degree: int = 5
    n_ctrl: int = 10
    optimize_knots: bool = False

    def __post_init__(self):
        if self.degree < 3:
            raise TrajectoryError("spline degree must be >= 3")
        if self.n_ctrl < self.degree + 1:
            raise TrajectoryError("need at least degree+1 control points")

    @property
    def n_interior_knots(self) -> int:
        return self.n_ctrl - self.degree - 1

    def n_free(self, n_joints: int) -> int:
        """Length of the design vector for this configuration."""
        n = (self.n_ctrl - 2) * n_joints
        if self.optimize_knots:
            n += self.n_interior_knots
        return n


def time_scaling(t, duration):
    """Quintic s(t) with zero velocity and acceleration at both ends."""
    tau = np.asarray(t, dtype=float) / duration
    s = tau**3 * (10.0 - 15.0 * tau + 6.0 * tau**2)
    ds = tau**2 * (30.0 - 60.0 * tau + 30.0 * tau**2) / duration
    dds = tau * (60.0 - 180.0 * tau + 120.0 * tau**2) / duration**2
    return s, ds, dds


def clamped_knots(degree: int, n_ctrl: int, interior=None) -> np.ndarray:
    """Clamped knot vector on [0, 1]; uniform interior knots by default."""
    n_int = n_ctrl - degree - 1
    if interior is None:
        interior = np.linspace(0.0, 1.0, n_int + 2)[1:-1]
    else:
        interior = np.sort(np.asarray(interior, dtype=float))
        if interior.size != n_int:
            raise TrajectoryError(f"expected {n_int} interior knots")
        interior = np.clip(interior, _KNOT_MARGIN, 1.0 - _KNOT_MARGIN)
    return np.concatenate(
        [np.zeros(degree + 1), interior, np.ones(degree + 1)]
    )


@dataclass(frozen=True)
class BSplineTrajectory:
    """Clamped joint-space B-spline with quintic time scaling."""

    degree: int
    knots: np.ndarray
    ctrl: np.ndarray  # (N, n_joints)
    duration: float
    _splines: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        ctrl = np.atleast_2d(np.asarray(self.ctrl, dtype=float))
        p = self.degree
        if ctrl.shape[0] != knots.size - p - 1:
            raise TrajectoryError("control point count inconsistent with knots")
        if np.any(np.diff(knots) < 0):
            raise TrajectoryError("knots must be nondecreasing")
        head, tail = knots[: p + 1], knots[-(p + 1):]
        if np.any(head != knots[0]) or np.any(tail != knots[-1]):
            raise TrajectoryError("knot vector must be clamped")
        if self.duration <= 0:
            raise TrajectoryError("duration must be positive")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "ctrl", ctrl)
        base = BSpline(knots, ctrl, p, extrapolate=False)
        object.__setattr__(
            self, "_splines", (base, base.derivative(1), base.derivative(2))
        )

    @property
    def n_joints(self) -> int:
        return self.ctrl.shape[1]

    def eval(self, t):
        """Reference (q_d, dq_d, ddq_d) at time(s) t in [0, duration]."""
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.duration + 1e-12):
            raise TrajectoryError("evaluation time outside [0, duration]")
        t = np.clip(t, 0.0, self.duration)
        s, ds, dds = time_scaling(t, self.duration)
        s = np.clip(s, 0.0, 1.0)
        b0, b1, b2 = self._splines
        q = b0(s)
        qs = b1(s)
        qss = b2(s)
        dq = qs * ds[..., None]
        ddq = qss * ds[..., None] ** 2 + qs * dds[..., None]
        return q, dq, ddq


def eval_reference(traj: BSplineTrajectory, t):
    return traj.eval(t)


def make_spline(q0, qT, d, config: SplineConfig, duration: float) -> BSplineTrajectory:
    """Assemble a trajectory from boundary configurations and a design vector."""
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    qT = np.atleast_1d(np.asarray(qT, dtype=float))
    if q0.shape != qT.shape:
        raise TrajectoryError("boundary configurations differ in dimension")
    n = q0.size
    d = np.asarray(d, dtype=float)
    if d.size != config.n_free(n):
        raise TrajectoryError(
            f"design vector length {d.size}, expected {config.n_free(n)}"
        )
    n_cp = (config.n_ctrl - 2) * n
    interior_cp = d[:n_cp].reshape(config.n_ctrl - 2, n)
    interior_knots = d[n_cp:] if config.optimize_knots else None
    ctrl = np.vstack([q0, interior_cp, qT])
    knots = clamped_knots(config.degree, config.n_ctrl, interior_knots)
    return BSplineTrajectory(config.degree, knots, ctrl, duration)


def pack_design(traj: BSplineTrajectory, config: SplineConfig) -> np.ndarray:
    """Inverse of make_spline for the free part of the trajectory."""
    parts = [traj.ctrl[1:-1].reshape(-1)]
    if config.optimize_knots:
        p = config.degree
        parts.append(traj.knots[p + 1: -(p + 1)])
    return np.concatenate(parts)


def straight_line_design(q0, qT, config: SplineConfig) -> np.ndarray:
    """Interior control points on the line between the boundary configurations."""
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    qT = np.atleast_1d(np.asarray(qT, dtype=float))
    alphas = np.linspace(0.0, 1.0, config.n_ctrl)[1:-1]
    pts = q0 + alphas[:, None] * (qT - q0)
    d = pts.reshape(-1)
    if config.optimize_knots:
        n_int = config.n_interior_knots
        d = np.concatenate([d, np.linspace(0.0, 1.0, n_int + 2)[1:-1]])
    return d


# ---------------------------------------------------------------------------
# serialization


def save_spline(traj: BSplineTrajectory, path) -> None:
    data = {
        "degree": int(traj.degree),
        "duration": float(traj.duration),
        "knots": [float(k) for k in traj.knots],
        "ctrl": [[float(v) for v in row] for row in traj.ctrl],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh)


def load_spline(path) -> BSplineTrajectory:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return BSplineTrajectory(
        data["degree"], np.array(data["knots"]), np.array(data["ctrl"]),
        data["duration"],
    )


def export_csv(traj: BSplineTrajectory, path, n_samples: int = 201) -> None:
    """Sampled reference as CSV rows (t, q_d..., dq_d..., ddq_d...)."""
    times = np.linspace(0.0, traj.duration, n_samples)
    q, dq, ddq = traj.eval(times)
    n = traj.n_joints
    header = (
        ["t"]
        + [f"qd{i}" for i in range(n)]
        + [f"dqd{i}" for i in range(n)]
        + [f"ddqd{i}" for i in range(n)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, t in enumerate(times):
            writer.writerow(
                [repr(float(v)) for v in np.concatenate([[t], q[k], dq[k], ddq[k]])]
            )


def import_csv(path):
    """Read a sampled reference CSV back as (t, q_d, dq_d, ddq_d) arrays."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    n = (len(header) - 1) // 3
    t = rows[:, 0]
    return t, rows[:, 1: 1 + n], rows[:, 1 + n: 1 + 2 * n], rows[:, 1 + 2 * n:]
