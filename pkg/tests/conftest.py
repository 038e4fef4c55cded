import numpy as np
import pytest

from dualmpc import example_config_path
from dualmpc.config import parse_config
from dualmpc.geometry import HyperBox, scaled_box
from dualmpc.model import UncertainModel


def example_matrices():
    A = np.array([[[0.9, 0.5], [0.2, 0.8]], [[0.1, 0.0], [0.0, 0.2]], [[0.0, 0.0], [0.0, 0.0]]])
    B = np.array([[[1.0, 0.5], [0.2, 0.775]], [[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.2], [0.0, 0.35]]])
    K = np.array([[-1.0, -0.2], [0.0, -1.0]])
    F = np.vstack([np.eye(2), -np.eye(2), np.zeros((4, 2))]) / 3.0
    G = np.vstack([np.zeros((4, 2)), np.eye(2), -np.eye(2)]) / 2.0
    return A, B, K, F, G


@pytest.fixture(scope="session")
def model():
    A, B, K, F, G = example_matrices()
    theta = HyperBox([-1.2, -1.2], [1.2, 1.2]).to_polytope()
    w = HyperBox([-0.1, -0.1], [0.1, 0.1]).to_polytope()
    return UncertainModel(A, B, K, F, G, theta, w)


@pytest.fixture(scope="session")
def X0():
    return scaled_box(3.0, 2)


@pytest.fixture(scope="session")
def example_cfg():
    return parse_config(example_config_path())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import CRITERIA
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])
