"""Polytopes in H-representation and the LP kernels built on them."""

from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

from .optim import LinearProgram, solve_lp

TOL = 1e-8
MAX_BOX_DIM = 16


class GeometryError(ValueError):
    pass


class AssumptionError(ValueError):
    """A standing assumption (stabilising gain, contractive tube shape) fails."""


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _lp_max(H, h, c):
    res = solve_lp(LinearProgram(-np.asarray(c, dtype=float), H, h))
    return res


class Polytope:
    """The set ``{x | H x <= h}``, optionally carrying its vertices.

    Construction checks that the set is nonempty and bounded by solving an LP
    in +/- every coordinate direction, and, when vertices are given, that they
    are consistent with the inequalities.
    """

    def __init__(self, H, h, vertices=None, check=True):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        h = np.asarray(h, dtype=float).ravel()
        if H.shape[0] != h.size:
            raise GeometryError(f"H has {H.shape[0]} rows but h has {h.size} entries")
        self.H = _freeze(H)
        self.h = _freeze(h)
        self.vertices = None if vertices is None else _freeze(np.atleast_2d(vertices))
        if check:
            self._check()

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def _check(self):
        n = self.dim
        for i in range(n):
            for s in (1.0, -1.0):
                c = np.zeros(n)
                c[i] = s
                res = _lp_max(self.H, self.h, c)
                if res.status == "infeasible":
                    raise GeometryError("polytope is empty")
                if res.status == "unbounded":
                    raise GeometryError(f"polytope is unbounded along {'+' if s > 0 else '-'}x[{i}]")
                if not res.ok:
                    raise GeometryError(f"boundedness LP failed: {res.message}")
        if self.vertices is not None:
            V = self.vertices
            if V.shape[1] != n:
                raise GeometryError("vertex dimension does not match H")
            slack = self.h[None, :] - V @ self.H.T
            if np.min(slack) < -TOL:
                raise GeometryError("a stored vertex violates H v <= h")
            loose = np.where(np.min(np.abs(slack), axis=0) > TOL)[0]
            if loose.size:
                raise GeometryError(f"rows {loose.tolist()} are not tight at any stored vertex")

    def support(self, c):
        return support(self, c)

    def contains(self, x, tol: float = TOL) -> bool:
        return contains(self, x, tol)

    def __repr__(self):
        return f"Polytope(dim={self.dim}, rows={self.H.shape[0]})"


class HyperBox:
    """Axis-aligned box ``lower <= x <= upper``."""

    def __init__(self, lower, upper):
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise GeometryError("lower and upper must have the same length")
        if np.any(lower > upper):
            raise GeometryError("box has lower > upper")
        self.lower = _freeze(lower)
        self.upper = _freeze(upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    def to_polytope(self, with_vertices=True) -> Polytope:
        n = self.dim
        H = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([self.upper, -self.lower])
        return Polytope(H, h, box_vertices(self) if with_vertices else None, check=False)

    def vertices(self) -> np.ndarray:
        return box_vertices(self)

    @classmethod
    def from_rhs(cls, h) -> "HyperBox":
        """Box from the RHS of ``[I; -I] x <= h``."""
        h = np.asarray(h, dtype=float).ravel()
        p = h.size // 2
        return cls(-h[p:], h[:p])

    @staticmethod
    def is_box_matrix(H) -> bool:
        H = np.asarray(H)
        if H.ndim != 2 or H.shape[0] != 2 * H.shape[1]:
            return False
        p = H.shape[1]
        return np.array_equal(H, np.vstack([np.eye(p), -np.eye(p)]))


def support(P: Polytope, c):
    """``max_{x in P} c.x`` and a maximiser."""
    c = np.asarray(c, dtype=float).ravel()
    res = _lp_max(P.H, P.h, c)
    if not res.ok:
        raise GeometryError(f"support LP failed ({res.status})")
    return -res.objective, res.x


def support_many(H, h, C):
    """Support values of ``{x | H x <= h}`` in every row direction of ``C``.

    All directions go into one block-diagonal LP. Returns ``(values, points,
    multipliers)`` where ``multipliers[i] >= 0`` satisfies
    ``multipliers[i] @ H == C[i]`` and ``multipliers[i] @ h == values[i]``, or
    ``None`` when the set is empty.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    h = np.asarray(h, dtype=float).ravel()
    C = np.atleast_2d(np.asarray(C, dtype=float))
    k, n = C.shape
    A = sp.block_diag([sp.csr_matrix(H)] * k, format="csr")
    res = solve_lp(LinearProgram(-C.ravel(), A, np.tile(h, k)))
    if res.status == "infeasible":
        return None
    if not res.ok:
        raise GeometryError(f"support LP failed ({res.status}: {res.message})")
    pts = res.x.reshape(k, n)
    lam = np.maximum(-res.ineq_duals.reshape(k, H.shape[0]), 0.0)
    return np.einsum("ij,ij->i", C, pts), pts, lam


def box_vertices(B: HyperBox) -> np.ndarray:
    """All 2^p corners, lexicographic with lower before upper in each coordinate."""
    p = B.dim
    if p > MAX_BOX_DIM:
        raise GeometryError(f"refusing to enumerate 2^{p} vertices (limit p <= {MAX_BOX_DIM})")
    pts = itertools.product(*[(lo, hi) for lo, hi in zip(B.lower, B.upper)])
    return np.array(list(pts), dtype=float).reshape(2 ** p, p)


def contains(P: Polytope, x, tol: float = TOL) -> bool:
    x = np.asarray(x, dtype=float).ravel()
    return bool(np.all(P.H @ x <= P.h + tol))


def scaled_box(radius, n) -> Polytope:
    """``{x : ||x||_inf <= radius}`` written as ``Hx x <= 1`` with vertices."""
    r = np.broadcast_to(np.asarray(radius, dtype=float), (n,))
    H = np.vstack([np.diag(1.0 / r), -np.diag(1.0 / r)])
    return Polytope(H, np.ones(2 * n), box_vertices(HyperBox(-r, r)))


def verify_contractivity(model, X0: Polytope, theta_vertices) -> float:
    """Contraction factor of the tube shape ``{Hx x <= 1}`` under ``A_cl(theta)``.

    The quantity ``[Hx]_i A_cl(theta) x`` is bilinear in ``(theta, x)``, so its
    maximum over the product of the two polytopes sits at a pair of vertices.
    Raises :class:`AssumptionError` if the factor is not below one.
    """
    if X0.vertices is None:
        raise GeometryError("contractivity check needs the vertices of the tube shape")
    if not np.allclose(X0.h, 1.0):
        raise GeometryError("tube shape must be normalised to Hx x <= 1")
    best, arg = -np.inf, None
    for j, th in enumerate(np.atleast_2d(theta_vertices)):
        vals = X0.H @ model.closed_loop(th) @ X0.vertices.T  # rows x vertices
        i, v = np.unravel_index(np.argmax(vals), vals.shape)
        if vals[i, v] > best:
            best, arg = float(vals[i, v]), (j, int(v), int(i))
    if best >= 1.0:
        j, v, i = arg
        raise AssumptionError(
            f"tube shape is not contractive: lambda_c = {best:.6g} >= 1 at parameter vertex {j} "
            f"{np.atleast_2d(theta_vertices)[j].tolist()}, state vertex {v} {X0.vertices[v].tolist()}, row {i}"
        )
    return max(best, 0.0)
