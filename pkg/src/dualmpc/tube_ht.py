"""Homothetic tubes ``{z} + alpha X0`` for the robust and the predicted tube."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Polytope, support_many
from .optim import Affine, LPBuilder


@dataclass(frozen=True)
class HtOffline:
    X0: Polytope
    fbar: np.ndarray  # support of X0 along each row of F + G K
    wbar: np.ndarray  # support of W along each row of Hx

    @property
    def Hx(self) -> np.ndarray:
        return self.X0.H

    @property
    def vertices(self) -> np.ndarray:
        return self.X0.vertices

    @property
    def nx(self) -> int:
        return self.X0.H.shape[0]


def ht_offline(model, X0: Polytope) -> HtOffline:
    if X0.vertices is None:
        raise ValueError("the homothetic tube shape needs its vertices")
    FGK = model.F + model.G @ model.K
    fbar = support_many(X0.H, X0.h, FGK)[0]
    wbar = support_many(model.W.H, model.W.h, X0.H)[0]
    return HtOffline(X0, fbar, wbar)


@dataclass
class HtTube:
    """Index arrays of one homothetic tube inside an :class:`LPBuilder`."""

    z: np.ndarray  # (N+1, n)
    alpha: np.ndarray  # (N+1,)
    lam: np.ndarray  # (L, q, nx, n_theta)


def _vertex_pairs(model, off, z, alpha, v, centre):
    """Affine tube vertices ``z + alpha x^j`` and inputs ``K(x - centre) + v``."""
    zA = Affine.variables(z)
    aA = Affine.variables([alpha])
    vA = Affine.variables(v)
    out = []
    for xj in off.vertices:
        x = zA + np.outer(xj, 1.0) @ aA
        u = model.K @ x + vA - model.K @ centre
        out.append((x, u))
    return out


def _lam_times(lam_idx, M):
    """Rows of ``Lam @ M`` for an (nx, nth) index block and numeric (nth, c) ``M``."""
    nx, nth = lam_idx.shape
    M = np.asarray(M, dtype=float).reshape(nth, -1)
    return np.kron(np.eye(nx), M.T) @ Affine.variables(lam_idx.ravel())


def _dual_rows(b, model, off, lam_idx, x, u, tag):
    """``Hx D(x, u) = Lam H_theta`` column by column."""
    H = model.theta_set.H
    for p in range(model.p):
        col = off.Hx @ (model.A[p + 1] @ x + model.B[p + 1] @ u)
        b.eq(col - _lam_times(lam_idx, H[:, p]), tag)


def ht_rst_constraints(b: LPBuilder, model, off: HtOffline, h_theta, x_k, refs, v, N, prefix="") -> HtTube:
    """Initial-set, state/input and propagation rows of the robust tube, ``l = 0..N-1``."""
    n = model.n
    q, nx, nth = off.vertices.shape[0], off.nx, model.n_theta
    z = b.var(prefix + "z", (N + 1, n))
    alpha = b.var(prefix + "alpha", N + 1, lb=0.0)
    lam = b.var(prefix + "lam", (N + 1, q, nx, nth), lb=0.0)
    FGK = model.F + model.G @ model.K
    b.le(off.Hx @ Affine.constant(x_k) - off.Hx @ Affine.variables(z[0]) - Affine.variables(np.repeat(alpha[0], nx)), "init")
    for l in range(N):
        zl, al, vl = Affine.variables(z[l]), Affine.variables([alpha[l]]), Affine.variables(v[l])
        row = FGK @ zl + model.G @ vl - model.G @ model.K @ refs[l] + np.outer(off.fbar, 1.0) @ al - 1.0
        b.le(row, "rst")
        a_next = Affine.variables(np.repeat(alpha[l + 1], nx))
        for j, (x, u) in enumerate(_vertex_pairs(model, off, z[l], alpha[l], v[l], refs[l])):
            d = model.A[0] @ x + model.B[0] @ u - Affine.variables(z[l + 1])
            b.le(_lam_times(lam[l, j], h_theta) + off.Hx @ d - a_next + off.wbar, "rst")
            _dual_rows(b, model, off, lam[l, j], x, u, "rst")
    return HtTube(z, alpha, lam)


def ht_terminal_constraints(b: LPBuilder, model, off: HtOffline, h_theta, tube: HtTube, v, N) -> None:
    """Invariance of ``{z_N} + alpha_N X0`` under ``u = K(x - z_N) + v_N``."""
    nx = off.nx
    zN, aN = tube.z[N], tube.alpha[N]
    row = model.F @ Affine.variables(zN) + model.G @ Affine.variables(v[N]) + np.outer(off.fbar, 1.0) @ Affine.variables([aN]) - 1.0
    b.le(row, "terminal")
    aA = Affine.variables(np.repeat(aN, nx))
    for j, xj in enumerate(off.vertices):
        x = Affine.variables(zN) + np.outer(xj, 1.0) @ Affine.variables([aN])
        u = np.outer(model.K @ xj, 1.0) @ Affine.variables([aN]) + Affine.variables(v[N])
        d = model.A[0] @ x + model.B[0] @ u - Affine.variables(zN)
        b.le(_lam_times(tube.lam[N, j], h_theta) + off.Hx @ d - aA + off.wbar, "terminal")
        _dual_rows(b, model, off, tube.lam[N, j], x, u, "terminal")


def ht_pst_constraints(b: LPBuilder, model, off: HtOffline, x_k, refs, v, N, theta_bar, slots) -> HtTube:
    """Predicted tube under the predicted parameter sets.

    The propagation rows are emitted without their ``Lam_hat @ delta_l`` term,
    which is bilinear; ``(first_row, lam_block, l)`` is appended to ``slots``
    so the caller can fill the term in for a given ``delta``.
    """
    n = model.n
    q, nx, nth = off.vertices.shape[0], off.nx, model.n_theta
    z = b.var("pst_z", (N + 1, n))
    alpha = b.var("pst_alpha", N + 1, lb=0.0)
    lam = b.var("pst_lam", (N, q, nx, nth), lb=0.0)
    A_bar, B_bar = model.A_of(theta_bar), model.B_of(theta_bar)
    b.le(off.Hx @ Affine.constant(x_k) - off.Hx @ Affine.variables(z[0]) - Affine.variables(np.repeat(alpha[0], nx)), "pst")
    for l in range(N):
        a_next = Affine.variables(np.repeat(alpha[l + 1], nx))
        for j, (x, u) in enumerate(_vertex_pairs(model, off, z[l], alpha[l], v[l], refs[l])):
            # Hx (A(theta_bar) x + B(theta_bar) u - z+) + Lam delta + wbar <= alpha+
            centre = A_bar @ x + B_bar @ u - Affine.variables(z[l + 1])
            r0 = b.le(off.Hx @ centre - a_next + off.wbar, "pst")
            slots.append((r0, lam[l, j], l))
            _dual_rows(b, model, off, lam[l, j], x, u, "pst")
    return HtTube(z, alpha, lam)


def ht_cost(b: LPBuilder, model, off: HtOffline, tube: HtTube, refs, v, ubar, terminal_centre, Q, R, beta, N):
    """Epigraph of the worst vertex cost per stage; returns the objective ``Affine``.

    Stage ``l < N`` uses ``u = K(x - r_l) + v_l``; the terminal stage uses the
    terminal law ``u = K(x - terminal_centre) + v_N`` and is scaled by ``beta``.
    """
    q = off.vertices.shape[0]
    t = b.var("cost_t", N + 1)
    a = b.var("cost_a", (N + 1, q))
    c = b.var("cost_b", (N + 1, q))
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    for l in range(N + 1):
        zl = Affine.variables(tube.z[l])
        al = Affine.variables([tube.alpha[l]])
        vl = Affine.variables(v[l])
        ub = Affine.variables(ubar[l])
        for j, xj in enumerate(off.vertices):
            x = zl + np.outer(xj, 1.0) @ al
            if l < N:
                u = model.K @ x - model.K @ refs[l] + vl
            else:
                u = model.K @ x - model.K @ Affine.variables(terminal_centre) + vl
            ex = Q @ (x - refs[l])
            eu = R @ (u - ub)
            aa = Affine.variables(np.repeat(a[l, j], ex.size))
            bb = Affine.variables(np.repeat(c[l, j], eu.size))
            b.le(ex - aa, "cost")
            b.le(-ex - aa, "cost")
            b.le(eu - bb, "cost")
            b.le(-eu - bb, "cost")
            b.le(Affine.variables([a[l, j]]) + Affine.variables([c[l, j]]) - Affine.variables([t[l]]), "cost")
    weights = np.ones(N + 1)
    weights[N] = beta
    return Affine.linear_map(weights[None, :], t)


def tube_vertices(off: HtOffline, z, alpha) -> np.ndarray:
    return np.asarray(z)[None, :] + float(alpha) * off.vertices
