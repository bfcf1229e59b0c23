"""Benchmark harness: sampling, config handling, grid bookkeeping, outputs."""

import numpy as np
import pytest
import yaml

from dualtraj import dynamics
from dualtraj.bench import (
    BenchError,
    ExperimentConfig,
    ResultRow,
    _cell_seed,
    _estimation_metrics,
    _merge,
    _param_coordinates,
    consistent_mixture,
    median_pose_errors,
    run_experiment,
    sample_payloads,
    write_results,
)


TINY = {
    "spline": {"degree": 3, "n_ctrl": 5},
    "optimization": {"max_iters": 2, "dt": 0.05},
    "simulation": {"dt": 0.01},
    "methods": ["nominal"],
    "controllers": ["ctc-fixed", "nac"],
    "n_payload_samples": 2,
}


@pytest.fixture(scope="module")
def tiny_run():
    cfg = ExperimentConfig.load(overrides=TINY)
    return cfg, *run_experiment(cfg)


# ---------------------------------------------------------------------------
# configuration


def test_merge_is_recursive_and_non_destructive():
    base = {"a": {"x": 1, "y": 2}, "b": 3}
    out = _merge(base, {"a": {"y": 5}, "c": 7})
    assert out == {"a": {"x": 1, "y": 5}, "b": 3, "c": 7}
    assert base["a"]["y"] == 2


def test_config_defaults_and_yaml_override(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"seed": 11, "payload": {"mass": 3.0}}))
    cfg = ExperimentConfig.load(path)
    assert cfg.raw["seed"] == 11
    assert cfg.raw["payload"]["mass"] == 3.0
    # untouched defaults survive
    assert cfg.raw["payload"]["relative_std"] == 0.5
    assert cfg.raw["spline"]["degree"] == 5


def test_config_validation():
    with pytest.raises(BenchError):
        ExperimentConfig.load(overrides={"n_payload_samples": 0})
    with pytest.raises(BenchError):
        ExperimentConfig.load(overrides={"methods": ["bayes"]})
    with pytest.raises(BenchError):
        ExperimentConfig.load(overrides={"task": {"ee_target": [5.0, 0.0]}})


def test_boundary_configs_reach_the_task_points():
    cfg = ExperimentConfig.load()
    model = cfg.model()
    q0, qT = cfg.boundary_configs(model)
    t = cfg.raw["task"]
    assert np.allclose(dynamics.ee_position(model, q0), t["ee_start"],
                       atol=1e-8)
    assert np.allclose(dynamics.ee_position(model, qT), t["ee_target"],
                       atol=1e-8)


# ---------------------------------------------------------------------------
# payload sampling


def test_sampled_payloads_are_consistent_and_seeded():
    cfg = ExperimentConfig.load()
    theta_bar, Q = cfg.payload_prior()
    a = sample_payloads(theta_bar, Q, 50, seed=4)
    b = sample_payloads(theta_bar, Q, 50, seed=4)
    c = sample_payloads(theta_bar, Q, 50, seed=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.all([dynamics.consistency_gap(th) > 0 for th in a])
    # empirical mean within a few prior standard deviations of the center
    assert np.all(
        np.abs(a.mean(axis=0) - theta_bar) < 4 * np.sqrt(np.diag(Q) / 50)
        + 0.2 * np.abs(theta_bar)
    )


def test_consistent_mixture_truncates_to_the_consistent_set():
    cfg = ExperimentConfig.load()
    theta_bar, Q = cfg.payload_prior()
    gmm = consistent_mixture(theta_bar, Q, 9)
    # every component mean is a physical payload
    assert np.all([dynamics.consistency_gap(mu) > 0 for mu in gmm.means])
    # moments stay exact for the components that were already inside
    from dualtraj.uq import build_gmm
    raw = build_gmm(theta_bar, Q, 9, "sigma")
    inside = [k for k, mu in enumerate(raw.means)
              if dynamics.consistency_gap(mu) >= 1e-3]
    assert len(inside) >= 7
    assert np.allclose(gmm.means[inside], raw.means[inside])
    # truncated means stay on the ray from the center to the raw sigma point
    out = [k for k in range(9) if k not in inside]
    for k in out:
        off_raw = raw.means[k] - theta_bar
        off = gmm.means[k] - theta_bar
        t = np.dot(off, off_raw) / np.dot(off_raw, off_raw)
        assert 0.0 <= t < 1.0
        assert np.allclose(off, t * off_raw, atol=1e-12)


def test_hopeless_prior_raises():
    # center far outside the consistent set with a tiny spread
    theta_bar = np.array([1.0, 2.0, 2.0, 0.001])
    Q = np.eye(4) * 1e-8
    with pytest.raises(BenchError):
        sample_payloads(theta_bar, Q, 5, seed=0)


def test_param_coordinates_and_metrics():
    theta = np.array([2.0, 0.2, -0.1, 0.5])
    m, cx, cy, Icom = _param_coordinates(theta)
    assert m == 2.0
    assert cx == pytest.approx(0.1)
    assert cy == pytest.approx(-0.05)
    assert Icom == pytest.approx(0.5 - (0.04 + 0.01) / 2.0)
    rel, imp = _estimation_metrics(theta, theta, theta * 1.1)
    assert np.allclose(rel, 0.0)
    assert np.allclose(imp, 100.0)


def test_cell_seed_is_stable_and_distinct():
    s = _cell_seed(0, "nominal", "nac", 3)
    assert s == _cell_seed(0, "nominal", "nac", 3)
    assert s != _cell_seed(0, "nominal", "nac", 4)
    assert s != _cell_seed(0, "nominal", "ctc-rls", 3)
    assert s != _cell_seed(1, "nominal", "nac", 3)


# ---------------------------------------------------------------------------
# grid and outputs


def test_grid_cardinality_and_ordering(tiny_run):
    cfg, rows, designs, payloads = tiny_run
    assert len(rows) == 1 * 2 * 2   # methods x controllers x samples
    keys = [(r.method, r.controller, r.sample) for r in rows]
    assert keys == sorted(keys)
    assert set(designs) == {"nominal"}
    assert payloads.shape == (2, 4)


def test_write_results_files(tiny_run, tmp_path):
    cfg, rows, designs, _ = tiny_run
    out = tmp_path / "res"
    write_results(rows, out, cfg=cfg, designs=designs)
    rows_lines = (out / "rows.csv").read_text().strip().splitlines()
    assert len(rows_lines) == 1 + len(rows)
    timing_lines = (out / "timings.csv").read_text().strip().splitlines()
    assert len(timing_lines) == 1 + len(rows)
    summary_lines = (out / "summary.csv").read_text().strip().splitlines()
    assert len(summary_lines) == 1 + 2   # one per (method, controller)
    traj_lines = (out / "trajectories.csv").read_text().strip().splitlines()
    assert len(traj_lines) == 1 + 151 * len(designs)


def test_rows_csv_is_byte_deterministic(tiny_run, tmp_path):
    cfg, rows, designs, _ = tiny_run
    a, b = tmp_path / "a", tmp_path / "b"
    write_results(rows, a, cfg=cfg, designs=designs)
    rows2, designs2, _ = run_experiment(cfg, designs=designs)
    write_results(rows2, b, cfg=cfg, designs=designs2)
    assert (a / "rows.csv").read_bytes() == (b / "rows.csv").read_bytes()
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()


def test_summary_matches_reaggregation(tiny_run, tmp_path):
    cfg, rows, designs, _ = tiny_run
    out = tmp_path / "res"
    write_results(rows, out, cfg=cfg, designs=designs)
    data = np.genfromtxt(out / "summary.csv", delimiter=",", names=True,
                         dtype=None, encoding="utf-8")
    data = np.atleast_1d(data)
    for entry in data:
        grp = [r for r in rows
               if r.method == entry["method"]
               and r.controller == entry["controller"] and not r.diverged]
        rel_m = np.array([g.rel_err[0] for g in grp]).mean()
        poses = np.array([g.pose_error for g in grp])
        assert entry["rel_err_m_mean"] == pytest.approx(rel_m, rel=1e-12)
        assert entry["pose_median"] == pytest.approx(np.median(poses),
                                                     rel=1e-12)


def test_median_pose_errors_skips_diverged():
    rows = [
        ResultRow("nominal", "nac", 0, 0.1, np.zeros(4), np.zeros(4),
                  False, 0.0),
        ResultRow("nominal", "nac", 1, 0.3, np.zeros(4), np.zeros(4),
                  False, 0.0),
        ResultRow("nominal", "nac", 2, float("nan"), np.zeros(4),
                  np.zeros(4), True, 0.0),
    ]
    med = median_pose_errors(rows)
    assert med[("nominal", "nac")] == pytest.approx(0.2)
