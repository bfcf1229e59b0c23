import numpy as np
import pytest

from dualtraj.control import ControllerGains, EstimatorState
from dualtraj.dynamics import InertialParams, ManipulatorModel
from dualtraj.reference import SplineConfig, make_spline, straight_line_design
from dualtraj.simloop import TaskCost
from dualtraj import dynamics


@pytest.fixture(scope="session")
def model():
    robot = InertialParams.from_mass_com_inertia(
        [2.5, 1.5], [[0.5, 0.02], [0.4, -0.01]], [0.2, 0.1]
    )
    return ManipulatorModel(
        link_lengths=[1.0, 0.8], gravity=(0.0, -9.81),
        robot_params=robot, joint_damping=[0.5, 0.5],
    )


@pytest.fixture(scope="session")
def payload_bar():
    return InertialParams.from_mass_com_inertia(
        [2.0], [[0.04, 0.04]], [0.03]
    ).theta


@pytest.fixture(scope="session")
def gains():
    return ControllerGains(
        n_joints=2, gamma=0.5,
        Gamma=np.diag([0.5, 0.05, 0.05, 0.005]),
        rls_prior_cov=np.diag([1.0, 0.01, 0.01, 1e-4]),
    )


@pytest.fixture(scope="session")
def boundary():
    return np.array([-0.5, 1.2]), np.array([0.8, 0.4])


@pytest.fixture(scope="session")
def spline_cfg():
    return SplineConfig(degree=5, n_ctrl=8)


@pytest.fixture(scope="session")
def traj(boundary, spline_cfg):
    q0, qT = boundary
    d = straight_line_design(q0, qT, spline_cfg)
    return make_spline(q0, qT, d, spline_cfg, duration=3.0)


@pytest.fixture(scope="session")
def task_cost_fn(model, boundary):
    _, qT = boundary
    return TaskCost(p_target=dynamics.ee_position(model, qT))


@pytest.fixture
def estimator(payload_bar, gains):
    return EstimatorState(theta_hat=payload_bar, P=gains.rls_prior_cov)


def random_consistent_block(rng, scale=1.0):
    """Payload parameter block strictly inside the physical set."""
    m = rng.uniform(0.3, 3.0) * scale
    h = rng.normal(0.0, 0.1 * scale, 2) * m
    izz = (h @ h) / m + rng.uniform(0.01, 0.5) * scale
    return np.array([m, h[0], h[1], izz])
