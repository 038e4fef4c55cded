import numpy as np
import pytest

from dualmpc import sysid
from dualmpc.controller import (FT, HT, ConfigurationError, Controller, ControllerConfig, probing_offsets,
                                setpoint_inputs, terminal_weight)
from dualmpc.geometry import Polytope
from dualmpc.model import UncertainModel
from dualmpc.sim import Setup

N = 8
REFS = np.tile([1.0, 0.5], (N + 1, 1))


def test_terminal_weight():
    lam = 0.675
    assert terminal_weight(lam, 0, 8, None) == pytest.approx(1 / (1 - lam))
    assert terminal_weight(lam, 0, 8, 50) == pytest.approx((1 - lam ** 42) / (1 - lam))
    assert terminal_weight(lam, 41, 8, 50) == pytest.approx(1.0)
    assert terminal_weight(lam, 42, 8, 50) == 0.0


def test_probing_offsets():
    v = np.zeros((3, 2))
    out = probing_offsets(v, 0.5)
    assert len(out) == 4
    assert sorted(tuple(w[0]) for w in out) == [(-0.5, 0.0), (0.0, -0.5), (0.0, 0.5), (0.5, 0.0)]
    assert all(np.all(w[1:] == 0) for w in out)
    assert probing_offsets(v, 0.0) == []


def test_setpoint_inputs_are_equilibria(model):
    th = np.array([0.1, 0.1])
    u = setpoint_inputs(model, th, REFS, N)
    np.testing.assert_allclose(model.A_of(th) @ REFS[0] + model.B_of(th) @ u[0], REFS[1], atol=1e-12)


@pytest.mark.parametrize("kw", [dict(Np=9), dict(Np=1), dict(tube="XX"), dict(mode="greedy"),
                                dict(max_iter=-1), dict(n_chains=0), dict(radius=0.0)])
def test_config_validation(kw):
    base = dict(name="c", tube=HT, mode="passive")
    with pytest.raises(ConfigurationError):
        ControllerConfig(**{**base, **kw})


@pytest.mark.parametrize("tube", [HT, FT])
def test_passive_step_respects_constraints_and_warm_starts(model, X0, tube):
    setup = Setup(model, X0, [0.1, 0.1], mu_ft=0.0)
    cfg = ControllerConfig("c", tube, "passive", T=50)
    ctrl = setup.controller(cfg, [REFS[0]])
    ident = setup.identifier()
    x = np.zeros(2)
    theta = np.array([0.5, -0.5])
    for k in range(4):
        res = ctrl.step(ident, x, REFS, k)
        assert np.all(np.abs(res.u) <= 2 + 1e-8)
        if k:
            assert res.shift_residual <= 1e-7
        x_next = model.step(theta, x, res.u, np.zeros(2))
        ident = sysid.observe(model, ident, x, res.u, x_next)
        x = x_next


@pytest.mark.parametrize("tube,mode", [(HT, "exact"), (FT, "relaxed")])
def test_dual_without_iterations_equals_passive(model, X0, tube, mode):
    setup = Setup(model, X0, [0.1, 0.1], mu_ft=0.0)
    passive = setup.controller(ControllerConfig("p", tube, "passive", T=50), [REFS[0]])
    dual = setup.controller(ControllerConfig("d", tube, mode, T=50, max_iter=0, probe=0.5), [REFS[0]])
    ident = setup.identifier()
    a = passive.step(ident, np.array([0.5, -0.5]), REFS, 0)
    b = dual.step(ident, np.array([0.5, -0.5]), REFS, 0)
    assert a.u.tobytes() == b.u.tobytes()


def test_dual_step_is_not_worse_than_passive_objective(model, X0):
    setup = Setup(model, X0, [0.1, 0.1])
    ident = setup.identifier()
    cfg = ControllerConfig("d", HT, "exact", T=50, max_iter=2, probe=0.5)
    res = setup.controller(cfg, [REFS[0]]).step(ident, np.zeros(2), REFS, 0)
    assert res.report.objective_trace[-1] <= res.report.objective_trace[0] + 1e-9
    assert np.all(np.abs(res.u) <= 2 + 1e-8)


def test_flexible_tube_needs_box_parameters(model, X0):
    H = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    tri = Polytope(H, [1.0, 1.0, 1.0], vertices=[[1.0, 1.0], [1.0, -2.0], [-2.0, 1.0]])
    m2 = UncertainModel(model.A * 0.5, model.B, model.K, model.F, model.G, tri, model.W, check=False)
    with pytest.raises(ConfigurationError, match="box"):
        Controller(m2, ControllerConfig("f", FT, "passive"), None, 0.5)
