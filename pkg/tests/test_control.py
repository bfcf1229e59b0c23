"""Adaptation laws, torque policies and least-squares estimator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtraj import dynamics
from dualtraj.control import (
    ControlError,
    ControllerGains,
    EstimatorState,
    classical_update,
    ctc_torque,
    nac_update,
    project_payload,
    pseudo_inertia,
    pseudo_inertia_inverse,
    rls_fixed_gain_update,
    rls_update,
    sliding_terms,
    slotine_li_torque,
    torque_dual,
)
from dualtraj.dynamics import InertialParams, JointState

from conftest import random_consistent_block


# ---------------------------------------------------------------------------
# pseudo-inertia parametrization


@given(
    theta=st.lists(st.floats(-2, 2), min_size=4, max_size=4),
    l=st.lists(st.floats(-2, 2), min_size=4, max_size=4),
)
@settings(max_examples=100, deadline=None)
def test_trace_duality(theta, l):
    theta = np.array(theta)
    l = np.array(l)
    lhs = np.trace(pseudo_inertia(theta) @ torque_dual(l))
    assert lhs == pytest.approx(theta @ l, abs=1e-10)


def test_pseudo_inertia_roundtrip():
    rng = np.random.default_rng(31)
    for _ in range(20):
        theta = rng.normal(0, 1, 4)
        back = pseudo_inertia_inverse(pseudo_inertia(theta))
        assert np.allclose(back, theta, atol=1e-14)


def test_pseudo_inertia_pd_cone():
    # PD of the matrix requires I > 2|h|^2/m, inside the physical set
    m, hx, hy = 1.0, 0.3, 0.1
    h2 = hx**2 + hy**2
    tight = np.array([m, hx, hy, 2 * h2 / m + 1e-6])
    loose = np.array([m, hx, hy, 2 * h2 / m - 1e-6])
    assert np.all(np.linalg.eigvalsh(pseudo_inertia(tight)) > 0)
    assert np.min(np.linalg.eigvalsh(pseudo_inertia(loose))) < 0
    # the physically consistent block between the cones is still consistent
    between = np.array([m, hx, hy, 1.5 * h2 / m])
    assert dynamics.consistency_gap(between) > 0


def test_nac_update_stays_symmetric_and_descends():
    rng = np.random.default_rng(32)
    gains = ControllerGains(n_joints=2, gamma=0.7)
    theta = random_consistent_block(rng)
    theta[3] = 2 * (theta[1] ** 2 + theta[2] ** 2) / theta[0] + 0.2
    Theta = pseudo_inertia(theta)
    Y_l = rng.normal(0, 1, (2, 4))
    s = rng.normal(0, 1, 2)
    dTheta = nac_update(gains, Theta, Y_l, s)
    assert np.allclose(dTheta, dTheta.T, atol=1e-14)
    # the update opposes the regressor-projected error direction:
    # d/dt (theta_hat . l) = tr(dTheta L) <= 0 when l aligns with itself
    l = Y_l.T @ s
    L = torque_dual(l)
    assert np.trace(dTheta @ L) <= 1e-12


def test_nac_update_rejects_indefinite_estimate():
    gains = ControllerGains(n_joints=2)
    bad = np.diag([1.0, -0.1, 0.1])
    with pytest.raises(ControlError):
        nac_update(gains, bad, np.zeros((2, 4)), np.zeros(2))


def test_classical_update_is_negative_gradient():
    gains = ControllerGains(n_joints=2, Gamma=np.diag([0.4, 0.3, 0.2, 0.1]))
    rng = np.random.default_rng(33)
    Y_l = rng.normal(0, 1, (2, 4))
    s = rng.normal(0, 1, 2)
    dtheta = classical_update(gains, Y_l, s)
    assert np.allclose(dtheta, -gains.Gamma @ (Y_l.T @ s), atol=1e-14)


def test_classical_update_requires_gain():
    gains = ControllerGains(n_joints=2)
    with pytest.raises(ControlError):
        classical_update(gains, np.zeros((2, 4)), np.zeros(2))


# ---------------------------------------------------------------------------
# torque policies


def test_sliding_policy_with_true_parameters_cancels_dynamics(model):
    # on the reference (zero error) the policy reduces to inverse dynamics
    rng = np.random.default_rng(34)
    gains = ControllerGains(n_joints=2)
    payload = InertialParams(random_consistent_block(rng)[None])
    q = rng.uniform(-1, 1, 2)
    dq = rng.normal(0, 1, 2)
    ddq = rng.normal(0, 1, 2)
    state = JointState(q, dq)
    ref = (q, dq, ddq)
    tau = slotine_li_torque(model, gains, state, ref, payload.theta)
    expect = dynamics.inverse_dynamics(model, payload, state, ddq)
    assert np.allclose(tau, expect, atol=1e-9)


def test_ctc_policy_with_true_parameters_cancels_dynamics(model):
    rng = np.random.default_rng(35)
    gains = ControllerGains(n_joints=2)
    payload = InertialParams(random_consistent_block(rng)[None])
    q = rng.uniform(-1, 1, 2)
    dq = rng.normal(0, 1, 2)
    ddq = rng.normal(0, 1, 2)
    state = JointState(q, dq)
    tau = ctc_torque(model, gains, state, (q, dq, ddq), payload.theta)
    expect = dynamics.inverse_dynamics(model, payload, state, ddq)
    assert np.allclose(tau, expect, atol=1e-9)


def test_sliding_terms_regressor_identity(model, payload_bar):
    rng = np.random.default_rng(36)
    gains = ControllerGains(n_joints=2, Lam=3.0)
    payload = InertialParams(payload_bar[None])
    theta = model.full_theta(payload)
    q, dq = rng.uniform(-1, 1, 2), rng.normal(0, 1, 2)
    q_d, dq_d, ddq_d = rng.normal(0, 1, (3, 2))
    state = JointState(q, dq)
    Y, s = sliding_terms(model, gains, state, (q_d, dq_d, ddq_d))
    a = ddq_d - gains.Lam * (dq - dq_d)
    v = dq - ((dq - dq_d) + gains.Lam * (q - q_d))
    ref_Y = dynamics.regressor(model, state, a, v)
    assert np.allclose(Y, ref_Y, atol=1e-11)
    assert np.allclose(s, (dq - dq_d) + gains.Lam * (q - q_d), atol=1e-14)


# ---------------------------------------------------------------------------
# recursive least squares


def test_rls_matches_batch_least_squares():
    # with P0 -> inf the RLS fixed point is ordinary least squares; with a
    # finite prior it equals the ridge solution, which we compute directly
    rng = np.random.default_rng(37)
    theta_true = np.array([1.5, 0.1, -0.2, 0.05])
    P0 = np.eye(4) * 100.0
    R = np.eye(2) * 0.01
    est = EstimatorState(theta_hat=np.zeros(4), P=P0)
    Ys, rs = [], []
    for _ in range(60):
        Y = rng.normal(0, 1, (2, 4))
        r = Y @ theta_true + rng.multivariate_normal(np.zeros(2), R)
        est = rls_update(est, Y, r, R)
        Ys.append(Y)
        rs.append(r)
    A = np.vstack(Ys)
    b = np.concatenate(rs)
    Rinv = np.linalg.inv(R)
    H = sum(Y.T @ Rinv @ Y for Y in Ys) + np.linalg.inv(P0)
    g = sum(Y.T @ Rinv @ r for Y, r in zip(Ys, rs))
    ridge = np.linalg.solve(H, g)
    assert np.allclose(est.theta_hat, ridge, atol=1e-8)
    assert np.allclose(est.P, np.linalg.inv(H), atol=1e-8)


def test_rls_covariance_never_grows():
    rng = np.random.default_rng(38)
    est = EstimatorState(theta_hat=np.zeros(4), P=np.eye(4))
    for _ in range(30):
        Y = rng.normal(0, 1, (2, 4))
        r = rng.normal(0, 1, 2)
        new = rls_update(est, Y, r, np.eye(2) * 0.1)
        diff = est.P - new.P
        assert np.min(np.linalg.eigvalsh(0.5 * (diff + diff.T))) > -1e-10
        est = new


def test_rls_fixed_gain_update():
    est = EstimatorState(theta_hat=np.zeros(4))
    Y = np.eye(4)[:2]
    r = np.array([1.0, 2.0])
    gain = 0.5 * Y.T
    new = rls_fixed_gain_update(est, gain, Y, r)
    assert np.allclose(new.theta_hat, [0.5, 1.0, 0.0, 0.0])


def test_rls_consistency_projection():
    est = EstimatorState(theta_hat=np.array([0.5, 0.0, 0.0, 0.1]),
                         P=np.eye(4))
    # an update driving the inertia negative gets projected back
    Y = np.array([[0.0, 0.0, 0.0, 1.0]])
    r = np.array([-5.0])
    new = rls_update(est, Y, r, np.array([[1e-4]]), project_consistent=True)
    assert dynamics.consistency_gap(new.theta_hat) > 0


def test_project_payload_idempotent_on_consistent_blocks():
    rng = np.random.default_rng(39)
    for _ in range(20):
        theta = random_consistent_block(rng)
        assert np.allclose(project_payload(theta), theta)


# ---------------------------------------------------------------------------
# validation


def test_gain_validation():
    with pytest.raises(ControlError):
        ControllerGains(n_joints=2, K=-1.0)
    with pytest.raises(ControlError):
        ControllerGains(n_joints=2, gamma=0.0)
    with pytest.raises(ControlError):
        ControllerGains(n_joints=2, Gamma=np.diag([1.0, 1.0, 1.0, -1.0]))


def test_estimator_state_validation():
    with pytest.raises(ControlError):
        EstimatorState(theta_hat=np.zeros(3))
    with pytest.raises(ControlError):
        EstimatorState(theta_hat=np.zeros(4), P=-np.eye(4))
