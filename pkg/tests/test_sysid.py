import numpy as np
import pytest

from dualmpc import sysid
from dualmpc.geometry import support_many


def run_identifier(model, rng, steps=15, theta=None, box_mode=True):
    theta = rng.uniform(-1.2, 1.2, 2) if theta is None else theta
    st = sysid.initial_state(model, [0.1, 0.1], tau=2, box_mode=box_mode)
    x = np.zeros(2)
    history = [st]
    for _ in range(steps):
        u = rng.uniform(-2, 2, 2)
        w = rng.uniform(-0.1, 0.1, 2)
        x_next = model.step(theta, x, u, w)
        st = sysid.observe(model, st, x, u, x_next)
        history.append(st)
        x = x_next
    return theta, history


def test_true_parameter_never_excluded_and_sets_shrink(model, rng):
    H = model.theta_set.H
    for _ in range(5):
        theta, hist = run_identifier(model, rng)
        for prev, cur in zip(hist, hist[1:]):
            assert np.all(H @ theta <= cur.h_theta + 1e-9)
            assert np.all(cur.h_theta <= prev.h_theta + 1e-12)
            assert np.all(H @ cur.theta_bar <= cur.h_theta + 1e-9)
        assert np.sum(hist[-1].h_theta) < np.sum(hist[0].h_theta)


def test_window_length(model, rng):
    _, hist = run_identifier(model, rng, steps=5)
    assert len(hist[-1].window) == 2


def test_tighten_matches_bounding_box_of_intersection(model, rng):
    H = model.theta_set.H
    theta, hist = run_identifier(model, rng, steps=1)
    st = hist[-1]
    Hd, hd = sysid.nonfalsified_set(model, st.window[-1:])
    h = sysid.tighten(H, hist[0].h_theta, Hd, hd)
    oracle = support_many(np.vstack([H, Hd]), np.concatenate([hist[0].h_theta, hd]), H)[0]
    np.testing.assert_allclose(h, np.minimum(oracle, hist[0].h_theta), atol=1e-9)


def test_projection_box_and_general(model):
    H, h = model.theta_set.H, model.theta_set.h
    np.testing.assert_allclose(sysid.project([2.0, -0.5], H, h, box_mode=True), [1.2, -0.5])
    p = sysid.project([2.0, -0.5], H, h, box_mode=False)
    assert np.all(H @ p <= h + 1e-9)
    assert np.max(np.abs(p - [2.0, -0.5])) == pytest.approx(0.8, abs=1e-8)
    inside = np.array([0.3, 0.3])
    np.testing.assert_array_equal(sysid.project(inside, H, h), inside)


def test_lms_moves_towards_truth(model, rng):
    theta = np.array([1.0, -1.0])
    st = sysid.initial_state(model, [0.0, 0.0], box_mode=True, lms_gain=0.5)
    err0 = np.linalg.norm(st.theta_bar - theta)
    x = np.array([1.0, 1.0])
    for _ in range(30):
        u = rng.uniform(-2, 2, 2)
        x_next = model.step(theta, x, u, np.zeros(2))
        st = sysid.update_estimate(model, st, x, u, x_next)
        x = np.clip(x_next, -3, 3)
    assert np.linalg.norm(st.theta_bar - theta) < 0.2 * err0


def test_inconsistent_data_falsifies(model):
    st = sysid.initial_state(model, [0.0, 0.0], box_mode=True)
    x, u = np.array([1.0, 1.0]), np.array([1.0, 1.0])
    x_next = model.step([0.0, 0.0], x, u, np.zeros(2)) + 5.0
    with pytest.raises(sysid.ModelFalsified):
        sysid.observe(model, st, x, u, x_next)
