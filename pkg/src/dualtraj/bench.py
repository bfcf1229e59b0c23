"""Benchmark harness: payload sampling, method x controller grid, CSV output.

One reference trajectory is generated per method (the design is
payload-independent), then every sampled payload is executed under every
controller on that reference.  Metrics per cell: final pose error,
per-parameter estimation errors and their improvement over the prior, and
a divergence flag.  Wall times are written to a separate file so the
result rows are byte-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import dynamics
from .control import ControllerGains
from .dynamics import InertialParams, ManipulatorModel
from .objective import (
    EvalContext,
    OptimalityLossModel,
    j_dual1,
    j_dual2,
    j_fim,
    nominal_cost,
    optimality_loss_model,
)
from .reference import (
    BSplineTrajectory,
    SplineConfig,
    export_csv,
    straight_line_design,
)
from .simloop import SimConfig, TaskCost, rollout, task_cost
from .trajopt import OptimizerConfig, optimize
from .uq import build_gmm

METHODS = ("nominal", "fim", "ro", "ol")


class BenchError(ValueError):
    pass


_DEFAULTS = {
    "model": {
        "link_lengths": [1.0, 0.8],
        "link_masses": [2.5, 1.5],
        "link_coms": [[0.5, 0.02], [0.4, -0.01]],
        "link_inertias": [0.2, 0.1],
        "gravity": [0.0, -9.81],
        "joint_damping": [0.5, 0.5],
    },
    "task": {
        "ee_start": [0.35, 1.25],
        "ee_target": [1.55, 0.55],
        "duration": 3.0,
    },
    "payload": {
        "mass": 2.0,
        "com": [0.04, 0.04],
        "inertia_com": 0.03,
        "relative_std": 0.5,
    },
    "spline": {"degree": 5, "n_ctrl": 8},
    "gains": {
        "K": 15.0,
        "Lam": 5.0,
        "Kp": 100.0,
        "Kd": 20.0,
        "gamma": 1.5,
        "Gamma": [0.1, 0.01, 0.01, 0.001],
        "rls_prior_cov": [1.0, 0.01, 0.01, 1e-4],
    },
    "cost": {
        "w_pose": 1000.0,
        "w_vel": 5.0,
        "w_torque": 1e-4,
    },
    "optimization": {
        "dt": 0.02,
        "method": "quasi-newton",
        "max_iters": 25,
        "tol": 1e-6,
        "fim_weight": 2e-2,
        "bound_radius": 1.5,
        "n_components": 9,
        "sigma_mode": "posterior",
        "ol_inner_iters": 25,
    },
    "simulation": {
        "dt": 0.002,
        "torque_noise_cov": 0.1,
        "rls_update_every": 50,
    },
    "methods": ["nominal", "fim", "ro", "ol"],
    "controllers": ["nac", "ctc-rls", "ctc-fixed"],
    "n_payload_samples": 20,
    "seed": 0,
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Fully resolved benchmark configuration (documented in the README)."""

    raw: dict

    def __post_init__(self):
        cfg = self.raw
        if cfg["n_payload_samples"] < 1:
            raise BenchError("need at least one payload sample")
        if cfg["payload"]["relative_std"] <= 0:
            raise BenchError("payload covariance scale must be positive")
        for m in cfg["methods"]:
            if m not in METHODS:
                raise BenchError(f"unknown method {m!r}")
        reach = float(np.sum(cfg["model"]["link_lengths"]))
        for key in ("ee_start", "ee_target"):
            p = np.asarray(cfg["task"][key], dtype=float)
            if np.linalg.norm(p) > reach:
                raise BenchError(f"{key} outside workspace radius {reach}")

    @classmethod
    def load(cls, path=None, overrides=None) -> "ExperimentConfig":
        data = {}
        if path is not None:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        merged = _merge(_DEFAULTS, data)
        merged = _merge(merged, overrides or {})
        return cls(raw=merged)

    # -- derived objects ---------------------------------------------------

    def model(self) -> ManipulatorModel:
        m = self.raw["model"]
        robot = InertialParams.from_mass_com_inertia(
            m["link_masses"], m["link_coms"], m["link_inertias"]
        )
        return ManipulatorModel(
            link_lengths=m["link_lengths"], gravity=m["gravity"],
            robot_params=robot, joint_damping=m["joint_damping"],
        )

    def payload_prior(self):
        p = self.raw["payload"]
        theta_bar = InertialParams.from_mass_com_inertia(
            [p["mass"]], [p["com"]], [p["inertia_com"]]
        ).theta
        std = p["relative_std"] * np.abs(theta_bar)
        # floor keeps near-zero coordinates identifiable in the prior
        std = np.maximum(std, 1e-4)
        return theta_bar, np.diag(std**2)

    def gains(self) -> ControllerGains:
        g = self.raw["gains"]
        n = len(self.raw["model"]["link_lengths"])
        return ControllerGains(
            n_joints=n, K=g["K"], Lam=g["Lam"], Kp=g["Kp"], Kd=g["Kd"],
            gamma=g["gamma"], Gamma=np.diag(g["Gamma"]),
            rls_prior_cov=np.diag(g["rls_prior_cov"]),
        )

    def boundary_configs(self, model):
        t = self.raw["task"]
        q0 = dynamics.ik_solve(model, t["ee_start"], t.get("q0_guess"))
        qT = dynamics.ik_solve(model, t["ee_target"], t.get("qT_guess"))
        return q0, qT

    def context(self, controller: str) -> EvalContext:
        model = self.model()
        q0, qT = self.boundary_configs(model)
        theta_bar, _ = self.payload_prior()
        c = self.raw["cost"]
        cost = TaskCost(
            p_target=np.asarray(self.raw["task"]["ee_target"], dtype=float),
            w_pose=c["w_pose"], w_vel=c["w_vel"], w_torque=c["w_torque"],
        )
        sp = self.raw["spline"]
        return EvalContext(
            model=model, gains=self.gains(),
            spline=SplineConfig(degree=sp["degree"], n_ctrl=sp["n_ctrl"]),
            cost=cost, q0=q0, qT=qT,
            duration=self.raw["task"]["duration"],
            dt=self.raw["optimization"]["dt"],
            theta_prior=theta_bar, controller=controller,
        )

    def optimizer_config(self, max_iters=None, bounds=None) -> OptimizerConfig:
        o = self.raw["optimization"]
        return OptimizerConfig(
            method=o["method"],
            max_iters=o["max_iters"] if max_iters is None else max_iters,
            tol=o["tol"], seed=self.raw["seed"], bounds=bounds,
        )


def consistent_mixture(theta_bar, Q, n_components, margin=1e-3):
    """Sigma-point mixture with means truncated to the consistent set.

    The benchmark samples payloads by rejection, so the effective prior
    is the Gaussian truncated to physical consistency; sigma points that
    leave that set (e.g. non-positive mass) are pulled back along their
    offset direction until the consistency gap reaches the margin.
    """
    gmm = build_gmm(theta_bar, Q, n_components, "sigma")
    theta_bar = np.asarray(theta_bar, dtype=float)
    means = []
    for mu in gmm.means:
        if dynamics.consistency_gap(mu) >= margin:
            means.append(mu)
            continue
        off = mu - theta_bar
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if dynamics.consistency_gap(theta_bar + mid * off) >= margin:
                lo = mid
            else:
                hi = mid
        means.append(theta_bar + lo * off)
    from .uq import GaussianMixture
    return GaussianMixture(gmm.weights, np.array(means), gmm.covs)


def sample_payloads(theta_bar, Q, n, seed) -> np.ndarray:
    """Consistent payload draws from the prior, rejection-resampled.

    Returns (n, 4) parameter blocks; raises if the prior almost never
    produces a physically consistent payload.
    """
    rng = np.random.default_rng(seed)
    theta_bar = np.asarray(theta_bar, dtype=float)
    out = np.empty((n, 4))
    drawn = accepted = 0
    while accepted < n:
        cand = rng.multivariate_normal(theta_bar, Q)
        drawn += 1
        if dynamics.consistency_gap(cand) > 0:
            out[accepted] = cand
            accepted += 1
        if drawn > 100 * n and accepted < max(1, drawn // 100):
            raise BenchError(
                "payload prior rejects more than 99% of draws; check scale"
            )
    return out


@dataclass
class ResultRow:
    method: str
    controller: str
    sample: int
    pose_error: float
    rel_err: np.ndarray        # relative errors on (m, c_x, c_y, I_com)
    improvement: np.ndarray    # percent improvement over the prior guess
    diverged: bool
    wall_time: float


_PARAM_NAMES = ("m", "cx", "cy", "I")


def _param_coordinates(theta):
    """(m, c_x, c_y, I about the CoM) from a parameter block."""
    m, hx, hy, izz = theta
    return np.array([m, hx / m, hy / m, izz - (hx**2 + hy**2) / m])


def _estimation_metrics(theta_hat, theta_true, theta_prior):
    true_c = _param_coordinates(theta_true)
    est_c = _param_coordinates(theta_hat)
    prior_c = _param_coordinates(theta_prior)
    denom = np.maximum(np.abs(true_c), 1e-9)
    rel = np.abs(est_c - true_c) / denom
    rel0 = np.abs(prior_c - true_c) / denom
    with np.errstate(divide="ignore", invalid="ignore"):
        imp = 100.0 * (1.0 - rel / np.maximum(rel0, 1e-15))
    return rel, imp


def generate_trajectories(cfg: ExperimentConfig, methods=None, verbose=False):
    """One optimized design per method; the robust method gets a second
    design optimized against the adaptation-free loop for the fixed-gain
    controller comparisons."""
    methods = cfg.raw["methods"] if methods is None else methods
    theta_bar, Q = cfg.payload_prior()
    opt = cfg.raw["optimization"]
    designs = {}

    ctx_fast = cfg.context("ctc-fixed")
    d0 = straight_line_design(ctx_fast.q0, ctx_fast.qT, ctx_fast.spline)
    # a box around the straight-line design keeps every method inside the
    # same joint-space region and bounds the information reward
    r = opt["bound_radius"]
    bounds = np.stack([d0 - r, d0 + r], axis=1)

    def run_opt(fn, ctx, label, max_iters=None, start=None):
        t0 = time.perf_counter()
        res = optimize(fn, d0 if start is None else start,
                       cfg.optimizer_config(max_iters, bounds=bounds))
        if verbose:
            print(
                f"[{label}] value={res.value:.6g} evals={res.n_evals} "
                f"converged={res.converged} {time.perf_counter()-t0:.1f}s"
            )
        return res.d

    def nominal_design():
        # the robust and optimality-loss problems refine the nominal
        # solution, so it is computed once and reused as their start
        if "nominal" not in designs:
            designs["nominal"] = run_opt(
                lambda d: nominal_cost(d, theta_bar, ctx_fast), ctx_fast,
                "nominal",
            )
        return designs["nominal"]

    for method in methods:
        if method == "nominal":
            nominal_design()
        elif method == "fim":
            w = opt["fim_weight"]
            designs["fim"] = run_opt(
                lambda d: j_fim(d, theta_bar, w, ctx_fast), ctx_fast, "fim",
            )
        elif method == "ro":
            gmm = consistent_mixture(theta_bar, Q, opt["n_components"])
            ctx_nac = cfg.context("nac")
            dn = nominal_design()
            designs["ro"] = run_opt(
                lambda d: j_dual1(d, gmm, ctx_nac), ctx_nac, "ro", start=dn,
            )
            designs["ro-fixed"] = run_opt(
                lambda d: j_dual1(d, gmm, ctx_fast), ctx_fast, "ro-fixed",
                start=dn,
            )
        elif method == "ol":
            gmm = consistent_mixture(theta_bar, Q, opt["n_components"])
            ctx_nac = cfg.context("nac")
            olm = optimality_loss_model(
                theta_bar, ctx_fast,
                cfg.optimizer_config(opt["ol_inner_iters"], bounds=bounds),
                d0=d0,
            )
            designs["ol"] = run_opt(
                lambda d: j_dual2(d, gmm, olm, ctx_nac,
                                  sigma_mode=opt["sigma_mode"]),
                ctx_nac, "ol",
            )
    return designs


def _design_for(designs, method, controller):
    if method == "ro" and controller == "ctc-fixed" and "ro-fixed" in designs:
        return designs["ro-fixed"]
    return designs[method]


def _cell_seed(base_seed, method, controller, sample) -> int:
    key = f"{base_seed}:{method}:{controller}:{sample}".encode()
    return int.from_bytes(__import__("hashlib").sha256(key).digest()[:8], "big")


def run_experiment(cfg: ExperimentConfig, designs=None, verbose=False):
    """Full method x controller x payload grid; returns sorted result rows."""
    theta_bar, Q = cfg.payload_prior()
    payloads = sample_payloads(
        theta_bar, Q, cfg.raw["n_payload_samples"], cfg.raw["seed"]
    )
    if designs is None:
        designs = generate_trajectories(cfg, verbose=verbose)

    model = cfg.model()
    gains = cfg.gains()
    ctx = cfg.context("nac")   # shared geometry, cost and boundaries
    sim = cfg.raw["simulation"]
    rows = []
    for method in cfg.raw["methods"]:
        for controller in cfg.raw["controllers"]:
            d = _design_for(designs, method, controller)
            traj = ctx.make_traj(d)
            for i, theta_true in enumerate(payloads):
                scfg = SimConfig(
                    duration=cfg.raw["task"]["duration"], dt=sim["dt"],
                    controller=controller,
                    torque_noise_cov=sim["torque_noise_cov"],
                    rls_update_every=sim["rls_update_every"],
                    seed=_cell_seed(cfg.raw["seed"], method, controller, i),
                )
                est = _prior_estimator(gains, theta_bar)
                t0 = time.perf_counter()
                log = rollout(
                    model, InertialParams(theta_true[None]), traj, gains,
                    est, scfg,
                )
                wall = time.perf_counter() - t0
                if log.diverged:
                    pose_err = float("nan")
                    theta_fin = theta_bar
                else:
                    p_fin = dynamics.ee_position(model, log.q[-1])
                    pose_err = float(
                        np.linalg.norm(p_fin - ctx.cost.p_target)
                    )
                    theta_fin = log.theta_hat[-1]
                rel, imp = _estimation_metrics(theta_fin, theta_true, theta_bar)
                rows.append(ResultRow(
                    method=method, controller=controller, sample=i,
                    pose_error=pose_err, rel_err=rel, improvement=imp,
                    diverged=bool(log.diverged), wall_time=wall,
                ))
    rows.sort(key=lambda r: (r.method, r.controller, r.sample))
    return rows, designs, payloads


def _prior_estimator(gains, theta_bar):
    from .control import EstimatorState
    return EstimatorState(theta_hat=theta_bar, P=gains.rls_prior_cov)


def write_results(rows, out_dir, cfg: ExperimentConfig = None,
                  designs=None) -> None:
    """rows.csv, summary.csv, trajectories.csv and timings.csv.

    Wall times go to timings.csv only, keeping rows.csv a pure function of
    the configuration.
    """
    import os
    os.makedirs(out_dir, exist_ok=True)
    if not rows:
        raise BenchError("no result rows to write")

    header = (
        ["method", "controller", "sample", "pose_error"]
        + [f"rel_err_{p}" for p in _PARAM_NAMES]
        + [f"improvement_{p}" for p in _PARAM_NAMES]
        + ["diverged"]
    )
    with open(os.path.join(out_dir, "rows.csv"), "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            vals = (
                [r.method, r.controller, str(r.sample), repr(float(r.pose_error))]
                + [repr(float(v)) for v in r.rel_err]
                + [repr(float(v)) for v in r.improvement]
                + [str(int(r.diverged))]
            )
            fh.write(",".join(vals) + "\n")

    with open(os.path.join(out_dir, "timings.csv"), "w", newline="") as fh:
        fh.write("method,controller,sample,wall_time\n")
        for r in rows:
            fh.write(
                f"{r.method},{r.controller},{r.sample},{repr(float(r.wall_time))}\n"
            )

    groups = {}
    for r in rows:
        groups.setdefault((r.method, r.controller), []).append(r)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        head = ["method", "controller", "n", "n_diverged"]
        head += [f"rel_err_{p}_mean" for p in _PARAM_NAMES]
        head += [f"rel_err_{p}_std" for p in _PARAM_NAMES]
        head += [f"improvement_{p}_mean" for p in _PARAM_NAMES]
        head += ["pose_q25", "pose_median", "pose_q75"]
        fh.write(",".join(head) + "\n")
        for (method, controller), grp in sorted(groups.items()):
            ok = [g for g in grp if not g.diverged]
            rel = np.array([g.rel_err for g in ok]) if ok else np.full((1, 4), np.nan)
            imp = np.array([g.improvement for g in ok]) if ok else np.full((1, 4), np.nan)
            poses = np.array([g.pose_error for g in ok]) if ok else np.array([np.nan])
            vals = [method, controller, str(len(grp)),
                    str(sum(g.diverged for g in grp))]
            vals += [repr(float(v)) for v in rel.mean(axis=0)]
            vals += [repr(float(v)) for v in rel.std(axis=0)]
            vals += [repr(float(v)) for v in imp.mean(axis=0)]
            vals += [repr(float(np.quantile(poses, q))) for q in (0.25, 0.5, 0.75)]
            fh.write(",".join(vals) + "\n")

    if cfg is not None and designs is not None:
        ctx = cfg.context("nac")
        times = np.linspace(0.0, ctx.duration, 151)
        with open(os.path.join(out_dir, "trajectories.csv"), "w", newline="") as fh:
            n = ctx.q0.size
            head = ["method", "t"] + [f"qd{i}" for i in range(n)] \
                + [f"dqd{i}" for i in range(n)]
            fh.write(",".join(head) + "\n")
            for name in sorted(designs):
                traj = ctx.make_traj(designs[name])
                q, dq, _ = traj.eval(times)
                for k, t in enumerate(times):
                    vals = [name, repr(float(t))] + [
                        repr(float(v)) for v in np.concatenate([q[k], dq[k]])
                    ]
                    fh.write(",".join(vals) + "\n")


def median_pose_errors(rows):
    """Median final pose error per (method, controller) over clean runs."""
    groups = {}
    for r in rows:
        if not r.diverged:
            groups.setdefault((r.method, r.controller), []).append(r.pose_error)
    return {k: float(np.median(v)) for k, v in sorted(groups.items())}
