"""Command-line interface: trajectory generation, simulation, benchmarking.

Subcommands:
  optimize   generate one reference trajectory for a method
  simulate   run one closed-loop rollout from a saved trajectory
  bench      run the full method x controller x payload grid
  fim        report the information matrix and design criteria of a trajectory
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dynamics
from .bench import (
    ExperimentConfig,
    generate_trajectories,
    run_experiment,
    write_results,
)
from .control import EstimatorState
from .dynamics import InertialParams
from .objective import fisher_information, oed_criterion
from .reference import export_csv, load_spline, pack_design, save_spline
from .simloop import SimConfig, rollout, task_cost


def _add_common(p):
    p.add_argument("--config", type=str, default=None,
                   help="YAML experiment configuration")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--out", type=str, default="out", help="output directory")


def _load_cfg(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return ExperimentConfig.load(args.config, overrides)


def _cmd_optimize(args) -> int:
    cfg = _load_cfg(args)
    designs = generate_trajectories(cfg, methods=[args.method], verbose=True)
    os.makedirs(args.out, exist_ok=True)
    ctx = cfg.context("nac")
    for name, d in sorted(designs.items()):
        traj = ctx.make_traj(d)
        save_spline(traj, os.path.join(args.out, f"trajectory_{name}.yaml"))
        export_csv(traj, os.path.join(args.out, f"trajectory_{name}.csv"))
        print(f"wrote trajectory_{name}.yaml / .csv to {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    traj = load_spline(args.traj)
    model = cfg.model()
    gains = cfg.gains()
    theta_bar, _ = cfg.payload_prior()
    sim = cfg.raw["simulation"]
    scfg = SimConfig(
        duration=traj.duration, dt=sim["dt"], controller=args.controller,
        torque_noise_cov=sim["torque_noise_cov"],
        rls_update_every=sim["rls_update_every"], seed=cfg.raw["seed"],
    )
    payload = (
        np.asarray([float(v) for v in args.payload.split(",")])
        if args.payload else theta_bar
    )
    est = EstimatorState(theta_hat=theta_bar, P=gains.rls_prior_cov)
    log = rollout(model, InertialParams(payload[None]), traj, gains, est, scfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "rollout.csv")
    log.export_csv(path)
    ctx = cfg.context(args.controller)
    J = task_cost(log, ctx.cost, model)
    pose = np.linalg.norm(
        dynamics.ee_position(model, log.q[-1]) - ctx.cost.p_target
    )
    print(f"wrote {path}")
    print(f"task cost: {J:.6g}  final pose error: {pose:.6g} m  "
          f"diverged: {log.diverged}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    if args.method:
        cfg.raw["methods"] = [args.method]
    if args.controller:
        cfg.raw["controllers"] = [args.controller]
    rows, designs, _ = run_experiment(cfg, verbose=True)
    write_results(rows, args.out, cfg=cfg, designs=designs)
    print(f"wrote rows.csv, summary.csv, trajectories.csv, timings.csv "
          f"to {args.out}")
    return 0


def _cmd_fim(args) -> int:
    cfg = _load_cfg(args)
    traj = load_spline(args.traj)
    model = cfg.model()
    gains = cfg.gains()
    theta_bar, _ = cfg.payload_prior()
    sim = cfg.raw["simulation"]
    scfg = SimConfig(
        duration=traj.duration, dt=sim["dt"],
        controller=args.controller or "ctc-fixed", seed=cfg.raw["seed"],
    )
    est = EstimatorState(theta_hat=theta_bar, P=gains.rls_prior_cov)
    log = rollout(model, InertialParams(theta_bar[None]), traj, gains, est, scfg)
    info = fisher_information(log, np.eye(model.n_links))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "fim.csv")
    with open(path, "w", newline="") as fh:
        fh.write("i,j,value\n")
        for i in range(4):
            for j in range(4):
                fh.write(f"{i},{j},{repr(float(info.I[i, j]))}\n")
    print(f"wrote {path}")
    print(f"trace(I) = {np.trace(info.I):.6g}")
    for kind in "ADET":
        try:
            print(f"{kind}-criterion: {oed_criterion(info, kind):.6g}")
        except Exception as exc:
            print(f"{kind}-criterion: undefined ({exc})")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dualtraj",
        description="Dual-control reference trajectories for manipulators "
                    "with uncertain payloads",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="generate a trajectory for a method")
    _add_common(p)
    p.add_argument("--method", required=True,
                   choices=["nominal", "fim", "ro", "ol"])
    p.set_defaults(fn=_cmd_optimize)

    p = sub.add_parser("simulate", help="one rollout from a saved trajectory")
    _add_common(p)
    p.add_argument("--traj", required=True, help="trajectory YAML file")
    p.add_argument("--controller", default="nac",
                   choices=["nac", "sl-classical", "ctc-rls", "ctc-fixed"])
    p.add_argument("--payload", default=None,
                   help="true payload block m,hx,hy,I (default: prior mean)")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("bench", help="full benchmark grid")
    _add_common(p)
    p.add_argument("--method", default=None,
                   choices=["nominal", "fim", "ro", "ol"])
    p.add_argument("--controller", default=None,
                   choices=["nac", "ctc-rls", "ctc-fixed"])
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("fim", help="information report for a trajectory")
    _add_common(p)
    p.add_argument("--traj", required=True, help="trajectory YAML file")
    p.add_argument("--controller", default=None,
                   choices=["nac", "sl-classical", "ctc-rls", "ctc-fixed"])
    p.set_defaults(fn=_cmd_fim)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
