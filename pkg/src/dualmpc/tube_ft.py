"""Flexible tubes ``{x | Hx (x - r_l) <= h_l}`` with offline multipliers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import support_many
from .optim import Affine, LinearProgram, LPBuilder, solve_lp
from .tube_ht import _lam_times


class OfflineLPError(ValueError):
    pass


@dataclass(frozen=True)
class FtMultipliers:
    """Offline certificates for one reference point."""

    lam1: np.ndarray  # (n_c, nx) >= 0 with lam1 Hx = F + G K
    lam2: np.ndarray  # (nx, p+1, nx); lam2[i] Hx stacks [Hx]_i (A_p + B_p K)

    def vertex_rows(self, theta) -> np.ndarray:
        """``C[i] = [1 theta^T] lam2[i]`` for one parameter value."""
        w = np.concatenate([[1.0], np.asarray(theta, dtype=float)])
        return np.einsum("p,ipk->ik", w, self.lam2)


def _min_multipliers(Hx, C, weight):
    """Rows ``lam >= 0`` with ``lam Hx = C[s]`` minimising ``lam . weight`` (one LP)."""
    k = C.shape[0]
    nx, n = Hx.shape
    A_eq = sp.block_diag([sp.csr_matrix(Hx.T)] * k, format="csr")
    res = solve_lp(LinearProgram(np.tile(weight, k), A_eq=A_eq, b_eq=C.ravel(), lb=np.zeros(k * nx)))
    return None if not res.ok else res.x.reshape(k, nx)


def _propagation_multiplier(model, Hx, row, theta_vertices, weight):
    """Min-max LP for one tube row: ``min_L max_j [1 theta_j] L weight``."""
    p1 = model.p + 1
    nx, n = Hx.shape
    target = np.stack([row @ (model.A[p] + model.B[p] @ model.K) for p in range(p1)])  # (p+1, n)
    nL = p1 * nx
    ext = np.hstack([np.ones((len(theta_vertices), 1)), theta_vertices])  # (q, p+1)
    # L flattened row-major (p, k); [1 theta] L weight = sum_pk ext_p L_pk w_k
    obj_rows = np.einsum("jp,k->jpk", ext, weight).reshape(len(ext), nL)
    # column k of [1 theta_j] L must be nonnegative
    sign_rows = np.einsum("jp,kl->jkpl", ext, np.eye(nx)).reshape(len(ext) * nx, nL)
    A_ub = np.vstack([
        np.hstack([obj_rows, -np.ones((len(ext), 1))]),
        np.hstack([-sign_rows, np.zeros((sign_rows.shape[0], 1))]),
    ])
    b_ub = np.zeros(A_ub.shape[0])
    A_eq = np.hstack([np.kron(np.eye(p1), Hx.T), np.zeros((p1 * n, 1))])
    c = np.zeros(nL + 1)
    c[-1] = 1.0
    res = solve_lp(LinearProgram(c, A_ub, b_ub, A_eq, target.ravel()))
    if not res.ok:
        return None
    # the min-max only fixes the worst vertex; among its optima take the
    # smallest vertex sum so the remaining vertex rows are not arbitrary
    top = res.x[-1] + 1e-9 * max(1.0, abs(res.x[-1]))
    c2 = np.concatenate([obj_rows.sum(axis=0), [0.0]])
    ub = np.full(nL + 1, np.inf)
    ub[-1] = top
    tie = solve_lp(LinearProgram(c2, A_ub, b_ub, A_eq, target.ravel(), np.full(nL + 1, -np.inf), ub))
    x = tie.x if tie.ok else res.x
    return x[:nL].reshape(p1, nx)


@dataclass
class FtOffline:
    model: object
    Hx: np.ndarray
    theta_vertices: np.ndarray
    wbar: np.ndarray
    mu_ft: float
    cost_Q: np.ndarray  # (2 rows(Q), nx) multipliers bounding +-Q y
    cost_RK: np.ndarray  # (2 rows(R), nx) multipliers bounding +-R K y
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def nx(self) -> int:
        return self.Hx.shape[0]

    def at(self, r) -> FtMultipliers:
        """Multipliers for reference ``r`` (computed once per distinct value)."""
        r = np.asarray(r, dtype=float)
        key = r.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            hit = compute_multipliers(self.model, self.Hx, self.theta_vertices, r, self.mu_ft)
            self._cache[key] = hit
        return hit


def compute_multipliers(model, Hx, theta_vertices, r, mu_ft) -> FtMultipliers:
    weight = 1.0 + mu_ft * (Hx @ r)
    FGK = model.F + model.G @ model.K
    lam1 = _min_multipliers(Hx, FGK, weight)
    if lam1 is None:
        raise OfflineLPError("no nonnegative multiplier maps Hx onto the rows of F + G K; Hx cannot represent the constraints")
    lam2 = []
    for i, row in enumerate(Hx):
        L = _propagation_multiplier(model, Hx, row, theta_vertices, weight)
        if L is None:
            raise OfflineLPError(f"propagation multiplier LP infeasible for tube row {i}: Hx cannot represent the closed-loop map")
        lam2.append(L)
    return FtMultipliers(lam1, np.array(lam2))


def ft_offline(model, Hx, theta_vertices, Q, R, mu_ft=1.0, refs=()) -> FtOffline:
    Hx = np.atleast_2d(np.asarray(Hx, dtype=float))
    wbar = support_many(model.W.H, model.W.h, Hx)[0]
    Q = np.atleast_2d(Q)
    RK = np.atleast_2d(R) @ model.K
    ones = np.ones(Hx.shape[0])
    cq = _min_multipliers(Hx, np.vstack([Q, -Q]), ones)
    crk = _min_multipliers(Hx, np.vstack([RK, -RK]), ones)
    if cq is None or crk is None:
        raise OfflineLPError("Hx does not bound the cost directions (tube shape must be compact)")
    off = FtOffline(model, Hx, np.atleast_2d(theta_vertices), wbar, float(mu_ft), cq, crk)
    for r in refs:
        off.at(r)
    return off


@dataclass
class FtTube:
    h: np.ndarray  # (N+1, nx)
    lam: np.ndarray | None = None  # predicted tube only: (N, nx, n_theta)


def _propagation_row(model, off, C, Bth, h_l, r_l, r_next, v_l, h_next):
    """``C (h_l + Hx r_l) - Hx r_next - Hx B (K r_l - v_l) + wbar - h_next``."""
    Hx = off.Hx
    return (C @ Affine.variables(h_l) + C @ (Hx @ r_l) - Hx @ r_next - Hx @ Bth @ (model.K @ r_l)
            + (Hx @ Bth) @ Affine.variables(v_l) + off.wbar - Affine.variables(h_next))


def _constraint_row(model, mult, h_l, r_l, v_l, Hx):
    return (mult.lam1 @ Affine.variables(h_l) + mult.lam1 @ (Hx @ r_l) + model.G @ Affine.variables(v_l)
            - model.G @ model.K @ r_l - 1.0)


def ft_rst_constraints(b: LPBuilder, model, off: FtOffline, theta_vertices_k, x_k, refs, v, N, prefix="") -> FtTube:
    Hx = off.Hx
    h = b.var(prefix + "h", (N + 1, off.nx))
    b.le(Hx @ (np.asarray(x_k) - refs[0]) - Affine.variables(h[0]), "init")
    for l in range(N):
        mult = off.at(refs[l])
        b.le(_constraint_row(model, mult, h[l], refs[l], v[l], Hx), "rst")
        for th in theta_vertices_k:
            b.le(_propagation_row(model, off, mult.vertex_rows(th), model.B_of(th), h[l], refs[l], refs[l + 1], v[l], h[l + 1]), "rst")
    return FtTube(h)


def ft_terminal_constraints(b: LPBuilder, model, off: FtOffline, theta_vertices_k, tube: FtTube, refs, v, N) -> None:
    """Invariance of the last cross-section under ``u = K(x - r_N) + v_N``."""
    mult = off.at(refs[N])
    b.le(_constraint_row(model, mult, tube.h[N], refs[N], v[N], off.Hx), "terminal")
    for th in theta_vertices_k:
        b.le(_propagation_row(model, off, mult.vertex_rows(th), model.B_of(th), tube.h[N], refs[N], refs[N], v[N], tube.h[N]), "terminal")


def ft_pst_constraints(b: LPBuilder, model, off: FtOffline, x_k, refs, v, N, theta_bar, slots) -> FtTube:
    """Predicted tube; the maximum over each predicted box is taken in dual form.

    Row ``i`` of the propagation inequality is affine in ``theta`` with
    gradient ``g`` (affine in the tube variables). Its maximum over
    ``{H_theta (theta - theta_bar) <= delta}`` equals
    ``row(theta_bar) + min {Lam delta | Lam >= 0, Lam H_theta = g}``. The
    ``Lam delta`` term is left to the caller through ``slots`` as in
    :func:`tube_ht.ht_pst_constraints`.
    """
    Hx = off.Hx
    nx, nth = off.nx, model.n_theta
    H = model.theta_set.H
    h = b.var("pst_h", (N + 1, nx))
    lam = b.var("pst_lam", (N, nx, nth), lb=0.0)
    b.le(Hx @ (np.asarray(x_k) - refs[0]) - Affine.variables(h[0]), "pst")
    for l in range(N):
        mult = off.at(refs[l])
        centre = _propagation_row(model, off, mult.vertex_rows(theta_bar), model.B_of(theta_bar), h[l], refs[l], refs[l + 1], v[l], h[l + 1])
        r0 = b.le(centre, "pst")
        slots.append((r0, lam[l], l))
        hl = Affine.variables(h[l]) + Hx @ refs[l]
        vl = Affine.variables(v[l])
        for p in range(model.p):
            g = mult.lam2[:, p + 1, :] @ hl - Hx @ model.B[p + 1] @ (model.K @ refs[l]) + (Hx @ model.B[p + 1]) @ vl
            b.eq(g - _lam_times(lam[l], H[:, p]), "pst")
    return FtTube(h, lam)


def ft_cost(b: LPBuilder, model, off: FtOffline, tube: FtTube, v, ubar, R, beta, N):
    """Separated worst-case stage cost over each cross-section; returns the objective."""
    t = b.var("cost_t", N + 1)
    R = np.atleast_2d(R)
    for l in range(N + 1):
        hl = Affine.variables(tube.h[l])
        a = off.cost_Q @ hl
        du = R @ (Affine.variables(v[l]) - Affine.variables(ubar[l]))
        nr = R.shape[0]
        bq = off.cost_RK[:nr] @ hl + du
        bm = off.cost_RK[nr:] @ hl - du
        sa = b.var(f"cost_a{l}", 1)
        sb = b.var(f"cost_b{l}", 1)
        b.le(a - Affine.variables(np.repeat(sa, a.size)), "cost")
        b.le(Affine.stack([bq, bm]) - Affine.variables(np.repeat(sb, 2 * nr)), "cost")
        b.le(Affine.variables(sa) + Affine.variables(sb) - Affine.variables([t[l]]), "cost")
    weights = np.ones(N + 1)
    weights[N] = beta
    return Affine.linear_map(weights[None, :], t)


def separated_stage_cost(off: FtOffline, Q, R, K, h, v, ubar) -> float:
    """Numeric value of the separated FT stage bound for ``y`` in ``{Hx y <= h}``."""
    R = np.atleast_2d(R)
    nr = R.shape[0]
    du = R @ (np.asarray(v) - np.asarray(ubar))
    a = float(np.max(off.cost_Q @ h))
    bnd = float(max(np.max(off.cost_RK[:nr] @ h + du), np.max(off.cost_RK[nr:] @ h - du)))
    return a + bnd
