import numpy as np

from dualmpc.controller import FT, ControllerConfig
from dualmpc.sim import Setup
from dualmpc.tube_ft import compute_multipliers, ft_offline, separated_stage_cost

from helpers import collect_instances, one_step_excess, sample_points

Q, R = 4 * np.eye(2), np.eye(2)


def test_multiplier_identities(model, X0):
    Hx = X0.H
    for mu in (0.0, 1.0):
        for r in ([0.0, 0.0], [1.5, 1.0], [-1.0, 0.0]):
            mult = compute_multipliers(model, Hx, model.theta_vertices, np.array(r), mu)
            assert np.all(mult.lam1 >= 0)
            np.testing.assert_allclose(mult.lam1 @ Hx, model.F + model.G @ model.K, atol=1e-9)
            for th in model.theta_vertices:
                C = mult.vertex_rows(th)
                assert np.all(C >= -1e-9)
                np.testing.assert_allclose(C @ Hx, Hx @ model.closed_loop(th), atol=1e-9)


def test_zero_weight_multipliers_do_not_depend_on_the_reference(model, X0):
    a = compute_multipliers(model, X0.H, model.theta_vertices, np.array([1.5, 1.0]), 0.0)
    b = compute_multipliers(model, X0.H, model.theta_vertices, np.array([-1.0, 0.0]), 0.0)
    np.testing.assert_array_equal(a.lam2, b.lam2)


def test_cost_multipliers_bound_the_cost_rows(model, X0):
    off = ft_offline(model, X0.H, model.theta_vertices, Q, R)
    RK = R @ model.K
    np.testing.assert_allclose(off.cost_Q @ X0.H, np.vstack([Q, -Q]), atol=1e-9)
    np.testing.assert_allclose(off.cost_RK @ X0.H, np.vstack([RK, -RK]), atol=1e-9)


def test_separated_cost_overestimates_joint_cost(model, X0, rng):
    off = ft_offline(model, X0.H, model.theta_vertices, Q, R)
    for _ in range(20):
        h = rng.uniform(0.05, 1.0, 4)
        v, ubar = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        bound = separated_stage_cost(off, Q, R, model.K, h, v, ubar)
        ys = sample_points(X0.H, h, rng, 500)
        joint = np.max(np.abs(ys @ Q.T), axis=1) + np.max(np.abs((ys @ model.K.T + v - ubar) @ R.T), axis=1)
        assert bound >= joint.max() - 1e-9


def test_solved_tubes_are_reachable(model, X0, rng):
    setup = Setup(model, X0, [0.1, 0.1], mu_ft=0.0)
    cfg = ControllerConfig("ft", FT, "passive", T=50)
    off = setup.offline(FT, cfg.Q, cfg.R)
    for ident, refs, res in collect_instances(setup, cfg, 4, seed=5):
        assert one_step_excess(model, off, FT, ident, refs, res, cfg.N, rng, 200) <= 1e-7
