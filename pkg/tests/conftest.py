import numpy as np
import pytest
from hypothesis import settings

from odekkl.evaluation import sylvester_transform
from odekkl.integrate import TimeGrid
from odekkl.observer import make_kkl_observer
from odekkl.systems import make_linear, make_vanderpol
from odekkl.train import TrainConfig, generate_dataset, train

settings.register_profile("suite", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("suite")

A_ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])
C_ROT = np.array([[1.0, 0.0]])


@pytest.fixture(scope="session")
def rotation_system():
    return make_linear(A_ROT, C_ROT, domain=np.array([[-1.0, 1.0], [-1.0, 1.0]]))


@pytest.fixture(scope="session")
def rotation_transform():
    """Analytic latent-coordinate map for the rotation plant, eigenvalues -1,-2,-3."""
    return sylvester_transform(A_ROT, C_ROT, np.diag([-1.0, -2.0, -3.0]), np.ones((3, 1)))


@pytest.fixture(scope="session")
def trained_rotation_observer(rotation_system):
    """KKL observer fitted on the rotation plant; shared by estimate/loss tests."""
    obs = make_kkl_observer(
        2, 1, np.random.default_rng(1), hidden=(32, 32), eigenvalues=[-1.0, -2.0, -3.0]
    )
    ds = generate_dataset(
        rotation_system, 20, TimeGrid(0.0, 20.0, 0.02), np.random.default_rng(7)
    )
    cfg = TrainConfig(epochs=400, learning_rate=3e-3, learn_d=False, seed=0)
    obs, history = train(obs, ds, cfg)
    return obs, history


@pytest.fixture(scope="session")
def trained_scalar_observer():
    """KKL observer fitted on a stable scalar plant over a small start box."""
    sys = make_linear(
        np.array([[-1.0]]), np.array([[1.0]]), domain=np.array([[-0.1, 0.1]])
    )
    obs = make_kkl_observer(
        1, 1, np.random.default_rng(1), hidden=(32,), eigenvalues=[-2.0, -3.0]
    )
    ds = generate_dataset(sys, 20, TimeGrid(0.0, 5.0, 0.02), np.random.default_rng(7))
    cfg = TrainConfig(epochs=500, learning_rate=3e-3, learn_d=False, seed=0)
    obs, history = train(obs, ds, cfg)
    return obs, history


@pytest.fixture
def vdp():
    return make_vanderpol()
