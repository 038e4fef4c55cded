import numpy as np
import pytest

from dualmpc.geometry import AssumptionError, GeometryError, HyperBox
from dualmpc.model import ContractViolation, UncertainModel


def test_dimensions(model):
    assert (model.n, model.m, model.p) == (2, 2, 2)
    assert model.n_theta == 4 and model.n_c == 8
    assert model.theta_vertices.shape == (4, 2)


def test_parameter_affine_matrices(model):
    th = np.array([0.3, -0.7])
    np.testing.assert_allclose(model.A_of(th), model.A[0] + 0.3 * model.A[1] - 0.7 * model.A[2])
    np.testing.assert_allclose(model.B_of(th), model.B[0] + 0.3 * model.B[1] - 0.7 * model.B[2])


def test_regressor_reproduces_transition(model, rng):
    for _ in range(20):
        x, u, w = rng.normal(size=2), rng.normal(size=2), rng.uniform(-0.1, 0.1, 2)
        th = rng.uniform(-1.2, 1.2, 2)
        x_next = model.step(th, x, u, w)
        reg = model.regressor(x, u, x_next)
        # x+ = A0 x + B0 u + D theta + w  <=>  D theta + d = -w
        np.testing.assert_allclose(reg.D @ th + reg.d, -w, atol=1e-12)


def test_step_checks_contract(model):
    with pytest.raises(ContractViolation):
        model.step([0.0, 0.0], np.zeros(2), np.zeros(2), [0.2, 0.0])
    with pytest.raises(ContractViolation):
        model.step([1.3, 0.0], np.zeros(2), np.zeros(2), [0.0, 0.0])
    model.step([1.3, 0.0], np.zeros(2), np.zeros(2), [0.0, 0.0], check=False)


def test_equilibrium_input(model):
    th, r = np.array([0.2, -0.4]), np.array([1.0, 0.5])
    u = model.equilibrium_input(th, r)
    np.testing.assert_allclose(model.A_of(th) @ r + model.B_of(th) @ u, r, atol=1e-12)


def test_destabilising_gain_rejected(model):
    with pytest.raises(AssumptionError, match="K does not stabilise"):
        UncertainModel(model.A, model.B, np.zeros((2, 2)) + 2.0, model.F, model.G, model.theta_set, model.W)


def test_noncompact_constraints_rejected(model):
    F = model.F[:2]
    G = model.G[:2]
    with pytest.raises(GeometryError, match="not compact"):
        UncertainModel(model.A, model.B, model.K, F, G, model.theta_set, model.W)


def test_shape_errors(model):
    with pytest.raises(ValueError, match="K must be"):
        UncertainModel(model.A, model.B, np.zeros((1, 2)), model.F, model.G, model.theta_set, model.W)
    with pytest.raises(ValueError, match="parameter set"):
        UncertainModel(model.A, model.B, model.K, model.F, model.G, HyperBox([0], [1]).to_polytope(), model.W)
