import numpy as np
import pytest

from quifs import kernels
from quifs.dynamics import LinearDynamics, NonlinearDynamics
from quifs.mpc import Box, MpcProblem


@pytest.fixture(scope="session")
def gauss1():
    return kernels.catalog("gauss", 1)


@pytest.fixture(scope="session")
def lag3_d1():
    return kernels.catalog("laguerre-m3", 1)


@pytest.fixture(scope="session")
def lag3_d2():
    return kernels.catalog("laguerre-m3", 2)


@pytest.fixture(scope="session")
def lag5_d2():
    return kernels.catalog("laguerre-m5", 2)


@pytest.fixture(scope="session")
def double_integrator():
    """The 2-D benchmark system: A=[[1,.1],[0,1]], B=[.005,.1], N=15."""
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    return MpcProblem(
        horizon=15,
        dynamics=LinearDynamics(A, B),
        Q=np.eye(2), R=np.array([[1.0]]), P=np.zeros((2, 2)),
        state_set=Box(np.array([-6.0, -1.0]), np.array([6.0, 1.0])),
        control_set=Box(np.array([-2.0]), np.array([2.0])),
    )


@pytest.fixture(scope="session")
def coarse_policy(double_integrator):
    """Quickly synthesized wide-margin policy for the 2-D benchmark."""
    from quifs.synth import synthesize
    pol, events = synthesize(double_integrator, 0.4, "laguerre-m3",
                             config_hash="f" * 64)
    return pol


@pytest.fixture(scope="session")
def duffing_like():
    """Second-order nonlinear plant, forward Euler at ts=0.05, N=25."""
    dyn = NonlinearDynamics(rhs=("x2", "u1 - 0.6*x2 - x1**3 - x1"),
                            dim=2, control_dim=1, integrator="euler", ts=0.05)
    return MpcProblem(
        horizon=25, dynamics=dyn,
        Q=np.eye(2), R=np.array([[0.5]]), P=np.zeros((2, 2)),
        state_set=Box(np.array([-5.0, -5.0]), np.array([5.0, 5.0])),
        control_set=Box(np.array([-5.0]), np.array([5.0])),
    )
