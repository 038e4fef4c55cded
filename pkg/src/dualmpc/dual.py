"""Predicted measurements and predicted parameter sets.

The predicted sets are written relative to the current estimate,
``Theta_hat_l = {theta | H_theta (theta - theta_bar) <= delta_l}``. Along the
nominal rollout the predicted data rows then have the constant right-hand side
``h_w``, and the only quantity that depends nonlinearly on the inputs is the
offset vector ``delta_l``. It is computed exactly by LPs for fixed inputs,
and its first-order sensitivity comes from the LP multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .optim import LinearProgram, solve_lp

EXACT = "exact"
RELAXED = "relaxed"


@dataclass
class Rollout:
    x: np.ndarray  # (Np+1, n)
    u: np.ndarray  # (Np, m)
    dx: np.ndarray  # (Np+1, n, nv) sensitivity w.r.t. the flattened input offsets
    du: np.ndarray  # (Np, m, nv)


@dataclass
class PredictedSets:
    delta: np.ndarray  # (N+1, n_theta), delta[0] = h_theta_k - H_theta theta_bar
    jac: np.ndarray | None  # (N+1, n_theta, nv)
    multipliers: list  # per l >= 1: (n_theta, n_theta + rows) nonnegative, or None on fallback
    rollout: Rollout

    def h_theta(self, H_theta, theta_bar) -> np.ndarray:
        return self.delta + H_theta @ theta_bar


def predicted_trajectory(model, theta_bar, x_k, refs, v, Np) -> Rollout:
    """Nominal rollout under ``A(theta_bar), B(theta_bar)`` and the tube policy."""
    v = np.asarray(v, dtype=float)
    n, m = model.n, model.m
    nv = v.size
    A = model.A_of(theta_bar)
    Bm = model.B_of(theta_bar)
    K = model.K
    x = np.zeros((Np + 1, n))
    u = np.zeros((Np, m))
    dx = np.zeros((Np + 1, n, nv))
    du = np.zeros((Np, m, nv))
    x[0] = x_k
    for l in range(Np):
        u[l] = K @ (x[l] - refs[l]) + v[l]
        du[l] = K @ dx[l]
        du[l][:, l * m:(l + 1) * m] += np.eye(m)
        x[l + 1] = A @ x[l] + Bm @ u[l]
        dx[l + 1] = A @ dx[l] + Bm @ du[l]
    return Rollout(x, u, dx, du)


def _window_indices(l, tau, exact):
    return range(l - tau, l) if exact else range(-tau, l)


def _transition(roll: Rollout, past, i):
    """Transition ``i`` of the spliced record; negative indices are real data."""
    if i >= 0:
        return roll.x[i], roll.u[i], roll.x[i + 1], True
    if -i > len(past):
        return None
    x, u, x_next = past[len(past) + i]
    return x, u, x_next, False


def predicted_delta(model, roll: Rollout, past, l, tau, exact=True):
    """Data rows ``H_delta theta <= h_delta`` of the predicted non-falsified set at step ``l``."""
    Hw, hw = model.W.H, model.W.h
    Hs, hs = [], []
    for i in _window_indices(l, tau, exact):
        tr = _transition(roll, past, i)
        if tr is None:
            continue
        reg = model.regressor(*tr[:3])
        Hs.append(-Hw @ reg.D)
        hs.append(hw + Hw @ reg.d)
    if not Hs:
        return np.zeros((0, model.p)), np.zeros(0)
    return np.vstack(Hs), np.concatenate(hs)


def _offset_rows(model, roll, past, l, tau, exact, theta_bar):
    """Rows of the data cut in offset coordinates, with what is needed to differentiate them."""
    Hw, hw = model.W.H, model.W.h
    rows, rhs, meta = [], [], []
    for i in _window_indices(l, tau, exact):
        tr = _transition(roll, past, i)
        if tr is None:
            continue
        x, u, x_next, predicted = tr
        reg = model.regressor(x, u, x_next)
        rows.append(-Hw @ reg.D)
        rhs.append(hw if predicted else hw + Hw @ (reg.d + reg.D @ theta_bar))
        meta.append(i if predicted else None)
    if not rows:
        return np.zeros((0, model.p)), np.zeros(0), []
    return np.vstack(rows), np.concatenate(rhs), meta


def _solve_blocks(blocks, H_theta):
    """Row-wise maxima of ``H_theta u`` over several polytopes in one LP."""
    nth, p = H_theta.shape
    mats, rhs = [], []
    for M, e in blocks:
        for _ in range(nth):
            mats.append(sp.csr_matrix(M))
            rhs.append(e)
    lp = LinearProgram(-np.tile(H_theta.ravel(), len(blocks)), sp.block_diag(mats, format="csr"), np.concatenate(rhs))
    res = solve_lp(lp)
    if not res.ok:
        return None
    out = []
    r0 = 0
    c0 = 0
    for M, e in blocks:
        k = M.shape[0]
        u = res.x[c0:c0 + nth * p].reshape(nth, p)
        y = np.maximum(-res.ineq_duals[r0:r0 + nth * k].reshape(nth, k), 0.0)
        val = np.einsum("ij,ij->i", H_theta, u)
        out.append((val, u, y))
        r0 += nth * k
        c0 += nth * p
    return out


def _row_sensitivity(model, u_opt, y_data, meta, roll, nv):
    """d/dv of ``max`` through the data rows (envelope theorem)."""
    Hw = model.W.H
    nw = Hw.shape[0]
    g = np.zeros(nv)
    for b, i in enumerate(meta):
        if i is None:
            continue
        y = y_data[b * nw:(b + 1) * nw]
        if not np.any(y):
            continue
        Au = np.tensordot(u_opt, model.A[1:], axes=1)
        Bu = np.tensordot(u_opt, model.B[1:], axes=1)
        g += (y @ Hw) @ (Au @ roll.dx[i] + Bu @ roll.du[i])
    return g


def predict_parameter_sets(model, ident, x_k, refs, v, N, Np, mode=EXACT, with_jacobian=True) -> PredictedSets:
    """Offsets ``delta_l`` of the predicted parameter sets for fixed input offsets ``v``.

    ``mode`` selects the recursive form (each step cuts the previous predicted
    set with the current window) or the relaxed form (every step cuts the
    current set with all predicted data up to that step).
    """
    v = np.asarray(v, dtype=float)
    H = model.theta_set.H
    nth = H.shape[0]
    nv = v.size
    tb = ident.theta_bar
    exact = mode == EXACT
    roll = predicted_trajectory(model, tb, x_k, refs, v, Np)
    past = ident.window
    delta = np.zeros((N + 1, nth))
    jac = np.zeros((N + 1, nth, nv)) if with_jacobian else None
    delta[0] = np.maximum(ident.h_theta - H @ tb, 0.0)
    mults: list = [None] * (N + 1)

    cuts = [_offset_rows(model, roll, past, l, ident.tau, exact, tb) for l in range(1, Np + 1)]
    if exact:
        for l in range(1, Np + 1):
            M, e, meta = cuts[l - 1]
            sol = _solve_blocks([(np.vstack([H, M]), np.concatenate([delta[l - 1], e]))], H)
            if sol is None:
                delta[l] = delta[l - 1]
                if with_jacobian:
                    jac[l] = jac[l - 1]
                continue
            val, U, Y = sol[0]
            delta[l] = np.minimum(val, delta[l - 1])
            mults[l] = Y
            if with_jacobian:
                for r in range(nth):
                    jac[l, r] = Y[r, :nth] @ jac[l - 1] + _row_sensitivity(model, U[r], Y[r, nth:], meta, roll, nv)
    else:
        blocks = [(np.vstack([H, M]), np.concatenate([delta[0], e])) for M, e, _ in cuts]
        sol = _solve_blocks(blocks, H)
        for l in range(1, Np + 1):
            if sol is None:
                delta[l] = delta[0]
                continue
            val, U, Y = sol[l - 1]
            delta[l] = np.minimum(val, delta[0])
            mults[l] = Y
            if with_jacobian:
                meta = cuts[l - 1][2]
                for r in range(nth):
                    jac[l, r] = _row_sensitivity(model, U[r], Y[r, nth:], meta, roll, nv)
    delta[1:] = np.maximum(delta[1:], 0.0)
    for l in range(Np + 1, N + 1):
        delta[l] = delta[Np]
        if with_jacobian:
            jac[l] = jac[Np]
    return PredictedSets(delta, jac, mults, roll)


def dual_prediction_multipliers(H_theta, h_prev, H_delta, h_delta):
    """Tightest nonnegative ``Psi`` with ``Psi [H_theta; H_delta] = H_theta``.

    Each row minimises ``Psi_i [h_prev; h_delta]`` (the dual of the row-wise
    support LP); ties are broken by a second LP that minimises ``sum(Psi_i)``
    among the optimal rows. Returns ``(Psi, h_new)`` or ``None`` if a row is
    unbounded below (empty primal set).
    """
    M = np.vstack([H_theta, H_delta])
    rhs = np.concatenate([h_prev, h_delta])
    nth, k = H_theta.shape[0], M.shape[0]
    Psi = np.zeros((nth, k))
    for i in range(nth):
        bounds = (np.zeros(k), np.full(k, np.inf))
        first = solve_lp(LinearProgram(rhs, A_eq=M.T, b_eq=H_theta[i], lb=bounds[0], ub=bounds[1]))
        if not first.ok:
            return None
        opt = first.objective
        tie = solve_lp(LinearProgram(
            np.ones(k), A_ub=rhs[None, :], b_ub=np.array([opt + 1e-9 * max(1.0, abs(opt))]),
            A_eq=M.T, b_eq=H_theta[i], lb=bounds[0], ub=bounds[1],
        ))
        Psi[i] = tie.x if tie.ok else first.x
    return Psi, Psi @ rhs


def certificate_residual(Psi, H_theta, H_delta) -> float:
    """Largest violation of ``Psi >= 0`` and ``Psi [H_theta; H_delta] = H_theta``."""
    M = np.vstack([H_theta, H_delta])
    return max(float(np.max(-Psi, initial=0.0)), float(np.max(np.abs(Psi @ M - H_theta))))
