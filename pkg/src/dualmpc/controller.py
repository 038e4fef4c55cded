"""Online tube MPC problems, passive and dual, and the receding-horizon step."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tube_ft, tube_ht
from .dual import EXACT, RELAXED, predict_parameter_sets
from .geometry import HyperBox, box_vertices
from .optim import (Affine, AlternationReport, LinearProgram, LPBuilder, solve_bilinear_alternating,
                    solve_lp, tagged_violation)

HT, FT = "HT", "FT"
PASSIVE = "passive"
MODES = (PASSIVE, EXACT, RELAXED)
FEASIBILITY_TAGS = ("init", "rst", "terminal")


class InfeasibleError(RuntimeError):
    """The online problem has no feasible point."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ControllerConfig:
    name: str
    tube: str
    mode: str
    N: int = 8
    Np: int = 5
    tau: int = 1
    Q: np.ndarray = field(default_factory=lambda: 4.0 * np.eye(2))
    R: np.ndarray = field(default_factory=lambda: np.eye(2))
    T: int | None = None  # task length used by the terminal weight; None = unbounded task
    max_iter: int = 10
    tol: float = 1e-6
    radius: float = 0.5
    probe: float = 0.0  # amplitude of the probing starts on the first input (0 disables them)
    n_chains: int = 1  # trust-region runs, from the best distinct restored starts

    def __post_init__(self):
        if self.tube not in (HT, FT):
            raise ConfigurationError(f"tube must be {HT} or {FT}, got {self.tube!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.N < 1:
            raise ConfigurationError("N must be at least 1")
        if not 2 <= self.Np <= self.N:
            raise ConfigurationError(f"Np must lie in [2, N] = [2, {self.N}], got {self.Np}")
        if self.tau < 1:
            raise ConfigurationError("tau must be at least 1")
        if self.max_iter < 0:
            raise ConfigurationError("max_iter must be nonnegative")
        if self.n_chains < 1:
            raise ConfigurationError("n_chains must be at least 1")
        if self.probe < 0 or self.radius <= 0:
            raise ConfigurationError("probe must be nonnegative and radius positive")

    @property
    def dual(self) -> bool:
        return self.mode != PASSIVE


@dataclass
class TubeSolution:
    x: np.ndarray
    objective: float
    v: np.ndarray  # (N+1, m)
    ubar: np.ndarray  # (N+1, m)
    layout: dict
    pred: object = None  # PredictedSets for dual points


@dataclass
class StepResult:
    u: np.ndarray
    solution: TubeSolution
    report: AlternationReport
    feasible: bool
    objective: float
    shift_residual: float = np.nan
    solve_ms: float = 0.0


def terminal_weight(lambda_c, k, N, T) -> float:
    """``(1 - lambda_c^(T-j)) / (1 - lambda_c)`` at ``j = k + N``, zero past the task end."""
    if T is None:
        return 1.0 / (1.0 - lambda_c)
    rem = T - (k + N)
    if rem <= 0:
        return 0.0
    return (1.0 - lambda_c ** rem) / (1.0 - lambda_c)


def setpoint_inputs(model, theta_bar, refs, N) -> np.ndarray:
    """Inputs steering ``r_l`` to ``r_{l+1}`` under ``theta_bar``; the last is an equilibrium."""
    out = np.zeros((N + 1, model.m))
    Bm = model.B_of(theta_bar)
    if np.linalg.matrix_rank(Bm) < model.n:
        raise ConfigurationError("B(theta_bar) lacks full row rank: setpoint inputs are not defined")
    for l in range(N + 1):
        out[l] = model.equilibrium_input(theta_bar, refs[l], refs[min(l + 1, N)] if l < N else refs[N])
    return out


def probing_offsets(v, amplitude) -> list:
    """Copies of ``v`` with the first input moved by ``+-amplitude`` along each axis."""
    if amplitude <= 0:
        return []
    out = []
    for i in range(v.shape[1]):
        for sgn in (1.0, -1.0):
            w = v.copy()
            w[0, i] += sgn * amplitude
            out.append(w)
    return out


class Controller:
    """One receding-horizon controller; holds the previous solution for warm starts."""

    def __init__(self, model, cfg: ControllerConfig, offline, lambda_c: float):
        self.model = model
        self.cfg = cfg
        self.off = offline
        self.lambda_c = float(lambda_c)
        if cfg.tube == FT and not HyperBox.is_box_matrix(model.theta_set.H):
            raise ConfigurationError("flexible tubes need a box parameter set (H_theta = [I; -I])")
        self._prev = None

    def reset(self):
        self._prev = None

    # ------------------------------------------------------------------
    # problem assembly

    def _theta_vertices(self, h_theta):
        return box_vertices(HyperBox.from_rhs(h_theta))

    def _build(self, ident, x_k, refs, k, slots=None):
        """Assemble one LP.

        With ``slots=None`` this is the passive problem. Otherwise the
        predicted tube is added and carries the cost; its ``Lam delta`` terms
        are left out and recorded in ``slots`` (see :class:`_DualTemplate`).
        """
        model, cfg, N = self.model, self.cfg, self.cfg.N
        m = model.m
        b = LPBuilder()
        v = b.var("v", (N + 1, m))
        ubar = b.var("ubar", (N + 1, m))
        A_bar, B_bar = model.A_of(ident.theta_bar), model.B_of(ident.theta_bar)
        for l in range(N + 1):
            r_next = refs[l + 1] if l < N else refs[N]
            b.eq(B_bar @ Affine.variables(ubar[l]) + A_bar @ refs[l] - r_next, "setpoint")
        beta = terminal_weight(self.lambda_c, k, N, cfg.T)
        layout = {"v": v, "ubar": ubar}
        if cfg.tube == HT:
            rst = tube_ht.ht_rst_constraints(b, model, self.off, ident.h_theta, x_k, refs, v, N)
            tube_ht.ht_terminal_constraints(b, model, self.off, ident.h_theta, rst, v, N)
            layout.update(z=rst.z, alpha=rst.alpha, lam=rst.lam)
            costed = rst
            if slots is not None:
                costed = tube_ht.ht_pst_constraints(b, model, self.off, x_k, refs, v, N, ident.theta_bar, slots)
                layout.update(pst_lam=costed.lam)
            obj = tube_ht.ht_cost(b, model, self.off, costed, refs, v, ubar, rst.z[N], cfg.Q, cfg.R, beta, N)
        else:
            verts = self._theta_vertices(ident.h_theta)
            rst = tube_ft.ft_rst_constraints(b, model, self.off, verts, x_k, refs, v, N)
            tube_ft.ft_terminal_constraints(b, model, self.off, verts, rst, refs, v, N)
            layout.update(h=rst.h)
            costed = rst
            if slots is not None:
                costed = tube_ft.ft_pst_constraints(b, model, self.off, x_k, refs, v, N, ident.theta_bar, slots)
                layout.update(pst_lam=costed.lam)
            obj = tube_ft.ft_cost(b, model, self.off, costed, v, ubar, cfg.R, beta, N)
        lp, ub_tags, eq_tags = b.build(obj)
        return lp, ub_tags, eq_tags, layout

    def _solution(self, lp, layout, pred=None, basis=None):
        res = solve_lp(lp, basis)
        if not res.ok:
            return None, res
        x = res.x
        sol = TubeSolution(x, float(res.objective), x[layout["v"]], x[layout["ubar"]], layout, pred)
        return sol, res

    # ------------------------------------------------------------------
    # shifted candidate

    def shifted_candidate(self, prev: TubeSolution, prev_refs, refs, layout, n_var) -> np.ndarray:
        """Previous solution moved one step ahead, in the index space of ``layout``."""
        model, N = self.model, self.cfg.N
        K = model.K
        xp = prev.x
        pl = prev.layout
        cand = np.zeros(n_var)
        v_old = xp[pl["v"]]
        v_new = np.empty_like(v_old)
        v_new[:N - 1] = v_old[1:N]
        if self.cfg.tube == HT:
            zN = xp[pl["z"][N]]
            v_new[N - 1] = v_old[N] + K @ (prev_refs[N] - zN)
            v_new[N] = v_old[N]
            for key in ("z", "alpha", "lam"):
                old = xp[pl[key]]
                new = np.concatenate([old[1:], old[N:N + 1]])
                cand[layout[key]] = new
        else:
            v_new[N - 1] = v_old[N]
            v_new[N] = v_old[N] + K @ (refs[N] - prev_refs[N])
            h_old = xp[pl["h"]]
            h_new = np.concatenate([h_old[1:], h_old[N:N + 1]])
            h_new[N] = h_old[N] + self.off.Hx @ (prev_refs[N] - refs[N])
            cand[layout["h"]] = h_new
        cand[layout["v"]] = v_new
        return cand

    # ------------------------------------------------------------------

    def step(self, ident, x_k, refs, k) -> StepResult:
        t0 = time.perf_counter()
        refs = np.asarray(refs, dtype=float)
        lp, ub_tags, eq_tags, layout = self._build(ident, x_k, refs, k)
        shift_res = np.nan
        shifted_v = None
        if self._prev is not None:
            prev_sol, prev_refs = self._prev
            cand = self.shifted_candidate(prev_sol, prev_refs, refs, layout, lp.n)
            shift_res = tagged_violation(lp, ub_tags, eq_tags, cand, FEASIBILITY_TAGS)
            shifted_v = cand[layout["v"]]
        passive, res = self._solution(lp, layout)
        if passive is None:
            raise InfeasibleError(
                f"{self.cfg.name}: online problem {res.status} at k={k}"
                + ("" if self._prev is None else f" (shifted candidate residual {shift_res:.3g})")
            )
        best, report = passive, AlternationReport(objective_trace=[passive.objective], converged=True)
        if self.cfg.dual:
            problem = _DualProblem(self, ident, x_k, refs, k)
            extra = [] if shifted_v is None else [TubeSolution(None, np.inf, shifted_v, None, None)]
            extra += [TubeSolution(None, np.inf, v, None, None) for v in probing_offsets(passive.v, self.cfg.probe)]
            best, report = solve_bilinear_alternating(
                problem, passive, max_iter=self.cfg.max_iter, tol=self.cfg.tol,
                radius=self.cfg.radius, extra_starts=extra, n_chains=self.cfg.n_chains,
            )
        u = self.model.K @ (np.asarray(x_k) - refs[0]) + best.v[0]
        self._prev = (best, refs.copy())
        return StepResult(u, best, report, True, best.objective, shift_res, 1e3 * (time.perf_counter() - t0))


class _DualTemplate:
    """The dual LP of one time step with its bilinear entries kept symbolic.

    Each slot is a block of predicted-tube rows whose left-hand side misses
    ``Lam @ delta_l``. :meth:`instantiate` fills those entries in for a given
    ``delta`` and, for the trust-region step, adds the first-order term
    ``Lam0 J_l (v - v0)`` and the rows keeping the linearised offsets
    nonnegative.
    """

    def __init__(self, lp, layout, slots):
        self.lp = lp
        self.layout = layout
        self.nv = layout["v"].size
        if not np.array_equal(layout["v"].ravel(), np.arange(self.nv)):
            raise AssertionError("input offsets must be the first variable block")
        lam = np.stack([blk for _, blk, _ in slots])  # (S, nx, nth)
        S, nx, nth = lam.shape
        first = np.array([r0 for r0, _, _ in slots])
        self.lam = lam
        self.step_of = np.array([l for _, _, l in slots])
        self.row_of = (first[:, None] + np.arange(nx)).ravel()  # (S*nx,)
        self.entry_rows = np.repeat(self.row_of, nth)
        self.entry_cols = lam.ravel()
        self.entry_step = np.repeat(self.step_of, nx * nth)
        self.entry_comp = np.tile(np.arange(nth), S * nx)

    def instantiate(self, delta, v_lo, v_hi, lin=None):
        lp = self.lp
        shape = lp.A_ub.shape
        vals = delta[self.entry_step, self.entry_comp]
        A = lp.A_ub + sp.csr_matrix((vals, (self.entry_rows, self.entry_cols)), shape=shape)
        b = lp.b_ub.copy()
        lb, ub = lp.lb.copy(), lp.ub.copy()
        lb[:self.nv] = np.ravel(v_lo)
        ub[:self.nv] = np.ravel(v_hi)
        if lin is not None:
            x0, jac, v0, Np = lin
            lam0 = x0[self.lam]  # (S, nx, nth)
            slope = np.einsum("sit,stv->siv", lam0, jac[self.step_of]).reshape(-1, self.nv)
            A = A + sp.csr_matrix(
                (slope.ravel(), (np.repeat(self.row_of, self.nv), np.tile(np.arange(self.nv), self.row_of.size))),
                shape=shape,
            )
            b[self.row_of] += slope @ v0
            J = jac[1:Np + 1].reshape(-1, self.nv)
            trust = sp.hstack([sp.csr_matrix(-J), sp.csr_matrix((J.shape[0], shape[1] - self.nv))], format="csr")
            A = sp.vstack([A, trust], format="csr")
            b = np.concatenate([b, delta[1:Np + 1].ravel() - J @ v0])
        return LinearProgram(lp.c, A, b, lp.A_eq, lp.b_eq, lb, ub)


class _DualProblem:
    """Restoration and trust-region step for :func:`solve_bilinear_alternating`."""

    def __init__(self, ctrl: Controller, ident, x_k, refs, k):
        self.ctrl = ctrl
        self.ident = ident
        self.x_k = np.asarray(x_k, dtype=float)
        self.refs = refs
        self.k = k
        self.mode = EXACT if ctrl.cfg.mode == EXACT else RELAXED
        slots = []
        lp, _, _, layout = ctrl._build(ident, self.x_k, refs, k, slots=slots)
        self.template = _DualTemplate(lp, layout, slots)
        self._basis = {}  # last simplex basis per LP kind, for warm starts

    def _solve(self, kind, lp, pred=None):
        sol, res = self.ctrl._solution(lp, self.template.layout, pred, self._basis.get(kind))
        if res.basis is not None:
            self._basis[kind] = res.basis
        return sol

    def _predict(self, v):
        cfg = self.ctrl.cfg
        return predict_parameter_sets(self.ctrl.model, self.ident, self.x_k, self.refs, v, cfg.N, cfg.Np, self.mode)

    def restore(self, point):
        v = np.asarray(point.v, dtype=float)
        pred = self._predict(v)
        lp = self.template.instantiate(pred.delta, v, v)
        return self._solve("restore", lp, pred)

    def step(self, point, radius):
        pred = point.pred
        if pred is None:
            return None, None
        v0 = np.asarray(point.v, dtype=float).ravel()
        lp = self.template.instantiate(pred.delta, v0 - radius, v0 + radius,
                                       lin=(point.x, pred.jac, v0, self.ctrl.cfg.Np))
        sol = self._solve("step", lp)
        if sol is None:
            return None, None
        return sol, sol.objective
