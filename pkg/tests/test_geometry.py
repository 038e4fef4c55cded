import numpy as np
import pytest
from scipy.spatial import ConvexHull

from dualmpc.geometry import (AssumptionError, GeometryError, HyperBox, Polytope, box_vertices, contains,
                              scaled_box, support, support_many, verify_contractivity)
from dualmpc.model import UncertainModel


def random_hull(rng, dim, npts=12):
    pts = rng.normal(size=(npts, dim))
    hull = ConvexHull(pts)
    H = hull.equations[:, :-1]
    h = -hull.equations[:, -1]
    return Polytope(H, h, pts[hull.vertices], check=False)


def test_support_matches_vertex_maximum(rng):
    for dim in (2, 3):
        for _ in range(10):
            P = random_hull(rng, dim)
            c = rng.normal(size=dim)
            val, arg = support(P, c)
            assert val == pytest.approx(np.max(P.vertices @ c), abs=1e-8)
            assert contains(P, arg)


def test_support_many_returns_certificates(rng):
    P = random_hull(rng, 3)
    C = rng.normal(size=(5, 3))
    vals, pts, lam = support_many(P.H, P.h, C)
    np.testing.assert_allclose(vals, np.max(C @ P.vertices.T, axis=1), atol=1e-8)
    assert np.all(lam >= 0)
    np.testing.assert_allclose(lam @ P.H, C, atol=1e-7)
    np.testing.assert_allclose(lam @ P.h, vals, atol=1e-7)


def test_support_many_empty_set_gives_none():
    H = np.array([[1.0], [-1.0]])
    assert support_many(H, np.array([-1.0, -1.0]), np.eye(1)) is None


def test_unbounded_and_empty_rejected():
    with pytest.raises(GeometryError, match="unbounded"):
        Polytope(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones(2))
    with pytest.raises(GeometryError, match="empty"):
        Polytope(np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))


def test_stored_vertices_must_be_consistent():
    H = np.vstack([np.eye(2), -np.eye(2)])
    with pytest.raises(GeometryError):
        Polytope(H, np.ones(4), np.array([[2.0, 0.0]]))


def test_box_vertices_order():
    V = box_vertices(HyperBox([0, 10], [1, 11]))
    np.testing.assert_array_equal(V, [[0, 10], [0, 11], [1, 10], [1, 11]])


def test_from_rhs_round_trip():
    box = HyperBox([-1, -2], [3, 4])
    P = box.to_polytope()
    back = HyperBox.from_rhs(P.h)
    np.testing.assert_array_equal(back.lower, box.lower)
    np.testing.assert_array_equal(back.upper, box.upper)
    assert HyperBox.is_box_matrix(P.H)
    assert not HyperBox.is_box_matrix(2 * P.H)


def test_scaled_box_is_normalised():
    P = scaled_box([3.0, 2.0], 2)
    np.testing.assert_array_equal(P.h, np.ones(4))
    assert contains(P, [3.0, -2.0])
    assert not contains(P, [3.1, 0.0])


def test_contractivity_of_example(model, X0):
    # for a centred cube the factor is the largest closed-loop infinity norm over parameter vertices
    lam = verify_contractivity(model, X0, model.theta_vertices)
    assert lam == pytest.approx(0.675, abs=1e-12)


def test_contractivity_failure_names_vertices(model):
    A = np.array(model.A) * 1.0
    A[0] = A[0] + 0.5 * np.eye(2)
    bad = UncertainModel(A, model.B, model.K, model.F, model.G, model.theta_set, model.W, check=False)
    with pytest.raises(AssumptionError, match="parameter vertex .* state vertex"):
        verify_contractivity(bad, scaled_box(1.0, 2), bad.theta_vertices)
