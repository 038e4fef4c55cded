"""Linear-programming layer.

Three pieces live here:

* :class:`Affine`, a small vector-of-affine-functions type used to write
  constraints in terms of named LP variables,
* :class:`LPBuilder` / :class:`LinearProgram` / :func:`solve_lp`, a thin
  wrapper around the HiGHS dual simplex, with optional basis warm starts,
* :func:`solve_bilinear_alternating`, the trust-region driver used by the
  dual controllers to handle their bilinear constraints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol

import highspy
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ERROR = "error"

_HIGHS_OPTIONS = {
    "primal_feasibility_tolerance": FEAS_TOL,
    "dual_feasibility_tolerance": FEAS_TOL,
    "presolve": True,
}


class Affine:
    """A vector of affine functions ``coef @ x[cols] + const``.

    ``cols`` holds the sorted, unique LP variable indices the expression
    depends on and ``coef`` is dense over that support, which keeps the
    per-operation cost low for the small blocks tube constraints are made of.
    """

    __slots__ = ("cols", "coef", "const")
    __array_ufunc__ = None  # make ndarray @ Affine dispatch to __rmatmul__

    def __init__(self, cols, coef, const):
        self.cols = cols
        self.coef = coef
        self.const = const

    @classmethod
    def variables(cls, idx) -> "Affine":
        idx = np.asarray(idx, dtype=np.int64).ravel()
        if idx.size < 2 or np.all(idx[1:] > idx[:-1]):
            return cls(idx, np.eye(idx.size), np.zeros(idx.size))
        cols, pos = np.unique(idx, return_inverse=True)
        coef = np.zeros((idx.size, cols.size))
        coef[np.arange(idx.size), pos] = 1.0
        return cls(cols, coef, np.zeros(idx.size))

    @classmethod
    def constant(cls, c) -> "Affine":
        c = np.atleast_1d(np.asarray(c, dtype=float)).ravel()
        return cls(np.empty(0, dtype=np.int64), np.zeros((c.size, 0)), c.copy())

    @classmethod
    def linear_map(cls, M, idx, const=None) -> "Affine":
        """``M @ x[idx] + const`` for a dense numeric ``M``."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        base = cls.variables(idx)
        out = M @ base
        if const is not None:
            out.const = out.const + np.asarray(const, dtype=float).ravel()
        return out

    def __len__(self) -> int:
        return self.const.size

    @property
    def size(self) -> int:
        return self.const.size

    def _aligned(self, other: "Affine"):
        if self.cols.size == other.cols.size and np.array_equal(self.cols, other.cols):
            return self.cols, self.coef, other.coef
        cols = np.union1d(self.cols, other.cols)
        a = np.zeros((self.size, cols.size))
        b = np.zeros((other.size, cols.size))
        if self.cols.size:
            a[:, np.searchsorted(cols, self.cols)] = self.coef
        if other.cols.size:
            b[:, np.searchsorted(cols, other.cols)] = other.coef
        return cols, a, b

    def __add__(self, other):
        if isinstance(other, Affine):
            if other.size != self.size:
                raise ValueError(f"size mismatch {self.size} vs {other.size}")
            cols, a, b = self._aligned(other)
            return Affine(cols, a + b, self.const + other.const)
        return Affine(self.cols, self.coef, self.const + np.asarray(other, dtype=float))

    __radd__ = __add__

    def __neg__(self):
        return Affine(self.cols, -self.coef, -self.const)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, s):
        s = np.asarray(s, dtype=float)
        if s.ndim == 0:
            return Affine(self.cols, self.coef * s, self.const * s)
        return Affine(self.cols, self.coef * s[:, None], self.const * s)

    __rmul__ = __mul__

    def __rmatmul__(self, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return Affine(self.cols, M @ self.coef, M @ self.const)

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(self.size)[idx])
        return Affine(self.cols, self.coef[idx], self.const[idx])

    @staticmethod
    def stack(parts) -> "Affine":
        parts = list(parts)
        if not parts:
            return Affine.constant(np.zeros(0))
        cols = parts[0].cols
        for p in parts[1:]:
            if not np.array_equal(p.cols, cols):
                cols = np.union1d(cols, p.cols)
        m = sum(p.size for p in parts)
        coef = np.zeros((m, cols.size))
        const = np.empty(m)
        r = 0
        for p in parts:
            if p.cols.size:
                coef[r:r + p.size, np.searchsorted(cols, p.cols)] = p.coef
            const[r:r + p.size] = p.const
            r += p.size
        return Affine(cols, coef, const)

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.cols.size == 0:
            return self.const.copy()
        return self.coef @ x[self.cols] + self.const

    def sum(self) -> "Affine":
        return np.ones((1, self.size)) @ self


@dataclass
class LinearProgram:
    """``min c.x  s.t.  A_ub x <= b_ub,  A_eq x == b_eq,  lb <= x <= ub``."""

    c: np.ndarray
    A_ub: Optional[sp.csr_matrix] = None
    b_ub: Optional[np.ndarray] = None
    A_eq: Optional[sp.csr_matrix] = None
    b_eq: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.lb is None:
            self.lb = np.full(n, -np.inf)
        if self.ub is None:
            self.ub = np.full(n, np.inf)
        for name in ("A_ub", "A_eq"):
            A = getattr(self, name)
            if A is not None:
                A = sp.csr_matrix(A)
                if A.shape[1] != n:
                    raise ValueError(f"{name} has {A.shape[1]} columns, expected {n}")
                setattr(self, name, A)
        if self.A_ub is not None and self.A_ub.shape[0] != np.size(self.b_ub):
            raise ValueError("A_ub / b_ub row mismatch")
        if self.A_eq is not None and self.A_eq.shape[0] != np.size(self.b_eq):
            raise ValueError("A_eq / b_eq row mismatch")

    @property
    def n(self) -> int:
        return self.c.size

    def max_violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        v = [0.0, float(np.max(self.lb - x, initial=0.0)), float(np.max(x - self.ub, initial=0.0))]
        if self.A_ub is not None and self.A_ub.shape[0]:
            v.append(float(np.max(self.A_ub @ x - self.b_ub)))
        if self.A_eq is not None and self.A_eq.shape[0]:
            v.append(float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        return max(v)


@dataclass
class LPResult:
    status: str
    x: Optional[np.ndarray] = None
    objective: float = np.nan
    ineq_duals: Optional[np.ndarray] = None  # d objective / d b_ub (<= 0)
    eq_duals: Optional[np.ndarray] = None
    message: str = ""
    basis: Optional[object] = None  # final simplex basis, reusable as a warm start

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


_METHODS = ("highs-ds", "highs-ipm", "highs")
_INF = highspy.kHighsInf
_MS = highspy.HighsModelStatus


def _highs_model(lp: LinearProgram, A_ub, A_eq):
    blocks = [A for A in (A_ub, A_eq) if A is not None]
    n = lp.n
    A = sp.vstack(blocks, format="csc") if blocks else sp.csc_matrix((0, n))
    m_ub = 0 if A_ub is None else A_ub.shape[0]
    b_eq = np.zeros(0) if A_eq is None else np.asarray(lp.b_eq, dtype=float)
    model = highspy.HighsLp()
    model.num_col_ = n
    model.num_row_ = A.shape[0]
    model.col_cost_ = lp.c
    model.col_lower_ = np.where(np.isneginf(lp.lb), -_INF, lp.lb)
    model.col_upper_ = np.where(np.isposinf(lp.ub), _INF, lp.ub)
    model.row_lower_ = np.concatenate([np.full(m_ub, -_INF), b_eq])
    model.row_upper_ = np.concatenate([np.zeros(0) if A_ub is None else np.asarray(lp.b_ub, dtype=float), b_eq])
    model.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    model.a_matrix_.start_ = A.indptr
    model.a_matrix_.index_ = A.indices
    model.a_matrix_.value_ = A.data
    return model, m_ub


def _solve_highs(lp: LinearProgram, A_ub, A_eq, basis) -> Optional[LPResult]:
    model, m_ub = _highs_model(lp, A_ub, A_eq)
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("primal_feasibility_tolerance", FEAS_TOL)
    h.setOptionValue("dual_feasibility_tolerance", FEAS_TOL)
    h.passModel(model)
    if basis is not None:
        h.setBasis(basis)
    h.run()
    status = h.getModelStatus()
    if status == _MS.kUnboundedOrInfeasible:
        h.setOptionValue("presolve", "off")
        h.clearSolver()
        h.run()
        status = h.getModelStatus()
    if status == _MS.kOptimal:
        sol = h.getSolution()
        duals = np.asarray(sol.row_dual)
        return LPResult(OPTIMAL, np.asarray(sol.col_value), float(h.getInfo().objective_function_value),
                        duals[:m_ub], duals[m_ub:], "optimal", h.getBasis())
    if status == _MS.kInfeasible:
        return LPResult(INFEASIBLE, message="infeasible")
    if status == _MS.kUnbounded:
        return LPResult(UNBOUNDED, message="unbounded")
    return None


def _solve_linprog(lp: LinearProgram, A_ub, A_eq) -> LPResult:
    kw = dict(
        A_ub=A_ub,
        b_ub=lp.b_ub if A_ub is not None else None,
        A_eq=A_eq,
        b_eq=lp.b_eq if A_eq is not None else None,
        bounds=np.column_stack([lp.lb, lp.ub]),
        options=_HIGHS_OPTIONS,
    )
    for method in _METHODS:
        res = linprog(lp.c, method=method, **kw)
        if res.status in (0, 2, 3):
            break
    if res.status == 0:
        ineq = res.ineqlin.marginals if A_ub is not None else np.zeros(0)
        eq = res.eqlin.marginals if A_eq is not None else np.zeros(0)
        return LPResult(OPTIMAL, res.x, float(res.fun), ineq, eq, res.message)
    if res.status == 2:
        return LPResult(INFEASIBLE, message=res.message)
    if res.status == 3:
        return LPResult(UNBOUNDED, message=res.message)
    return LPResult(ERROR, message=res.message)


def solve_lp(lp: LinearProgram, basis=None) -> LPResult:
    """Solve ``lp`` with HiGHS. Infeasible/unbounded come back as statuses.

    ``basis`` is the ``LPResult.basis`` of an earlier LP with the same
    dimensions; it only changes where the simplex starts. A point that
    misses the constraints by more than ``FEAS_TOL`` is solved again, first
    cold and then through scipy's HiGHS methods, which also take over when
    HiGHS ends without a definite status.
    """
    A_ub = lp.A_ub if lp.A_ub is not None and lp.A_ub.shape[0] else None
    A_eq = lp.A_eq if lp.A_eq is not None and lp.A_eq.shape[0] else None
    res = _solve_highs(lp, A_ub, A_eq, basis)
    if basis is not None and not _accurate(lp, res):
        res = _solve_highs(lp, A_ub, A_eq, None)
    if not _accurate(lp, res):
        res = _solve_linprog(lp, A_ub, A_eq)
    return res


def _accurate(lp: LinearProgram, res: Optional[LPResult]) -> bool:
    # HiGHS occasionally reports optimal with unscaled residuals far above its tolerance
    return res is not None and (not res.ok or lp.max_violation(res.x) <= FEAS_TOL)


class LPBuilder:
    """Incremental LP assembly over named variable blocks.

    Constraints are added as ``expr <= 0`` / ``expr == 0`` and carry a tag so
    that residuals can later be checked block by block.
    """

    def __init__(self):
        self.n = 0
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self.index: dict[str, np.ndarray] = {}
        self._le: list[tuple[Affine, str]] = []
        self._eq: list[tuple[Affine, str]] = []
        self.n_le = 0
        self.n_eq = 0

    def var(self, name: str, shape=(), lb=-np.inf, ub=np.inf) -> np.ndarray:
        if name in self.index:
            raise KeyError(f"variable block {name!r} already exists")
        shape = (int(shape),) if np.isscalar(shape) else (tuple(shape) or (1,))
        size = int(np.prod(shape))
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self.n += size
        self._lb.append(np.broadcast_to(np.asarray(lb, dtype=float), (size,)).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, dtype=float), (size,)).copy())
        self.index[name] = idx
        return idx

    def le(self, expr: Affine, tag: str = "") -> int:
        """Add ``expr <= 0``; returns the index of its first row."""
        start = self.n_le
        if expr.size:
            self._le.append((expr, tag))
            self.n_le += expr.size
        return start

    def eq(self, expr: Affine, tag: str = "") -> int:
        start = self.n_eq
        if expr.size:
            self._eq.append((expr, tag))
            self.n_eq += expr.size
        return start

    def fix(self, idx, values, tag: str = "fix") -> None:
        self.eq(Affine.variables(idx) - np.asarray(values, dtype=float).ravel(), tag)

    @staticmethod
    def _assemble(parts, n):
        if not parts:
            return sp.csr_matrix((0, n)), np.zeros(0), np.array([], dtype=object)
        rows, cols, vals, rhs, tags = [], [], [], [], []
        r0 = 0
        for expr, tag in parts:
            if expr.cols.size:
                ii, jj = np.nonzero(expr.coef)
                rows.append(ii + r0)
                cols.append(expr.cols[jj])
                vals.append(expr.coef[ii, jj])
            rhs.append(-expr.const)
            tags.append(np.full(expr.size, tag, dtype=object))
            r0 += expr.size
        A = sp.csr_matrix(
            (np.concatenate(vals) if vals else np.zeros(0),
             (np.concatenate(rows) if rows else np.zeros(0, int), np.concatenate(cols) if cols else np.zeros(0, int))),
            shape=(r0, n),
        )
        return A, np.concatenate(rhs), np.concatenate(tags)

    def build(self, objective: Affine):
        """Return ``(LinearProgram, ub_tags, eq_tags)``; the objective constant is dropped."""
        c = np.zeros(self.n)
        if objective.size != 1:
            raise ValueError("objective must be scalar")
        np.add.at(c, objective.cols, objective.coef[0])
        A_ub, b_ub, ub_tags = self._assemble(self._le, self.n)
        A_eq, b_eq, eq_tags = self._assemble(self._eq, self.n)
        lp = LinearProgram(
            c, A_ub, b_ub, A_eq, b_eq,
            np.concatenate(self._lb) if self._lb else np.zeros(0),
            np.concatenate(self._ub) if self._ub else np.zeros(0),
        )
        return lp, ub_tags, eq_tags


def tagged_violation(lp: LinearProgram, ub_tags, eq_tags, x, tags) -> float:
    """Largest residual of the constraint rows whose tag is in ``tags``."""
    x = np.asarray(x, dtype=float)
    worst = 0.0
    if lp.A_ub is not None and lp.A_ub.shape[0]:
        sel = np.isin(ub_tags, list(tags))
        if sel.any():
            worst = max(worst, float(np.max(lp.A_ub[sel] @ x - lp.b_ub[sel])))
    if lp.A_eq is not None and lp.A_eq.shape[0]:
        sel = np.isin(eq_tags, list(tags))
        if sel.any():
            worst = max(worst, float(np.max(np.abs(lp.A_eq[sel] @ x - lp.b_eq[sel]))))
    return worst


# ---------------------------------------------------------------------------
# Bilinear driver


@dataclass
class AlternationReport:
    iterations: int = 0
    objective_trace: list = field(default_factory=list)
    converged: bool = False
    fallback_used: bool = False


class BilinearProblem(Protocol):
    """What :func:`solve_bilinear_alternating` needs from a problem.

    ``restore(point)`` fixes the coupling variables (the inputs) at the values
    carried by ``point``, refreshes every quantity derived from them exactly and
    re-solves the remaining LP; it returns a feasible point or ``None``.
    ``step(point, radius)`` solves the LP obtained by linearising the bilinear
    terms around ``point`` inside an infinity-norm trust region and returns a
    candidate point (or ``None``) together with the model objective.
    """

    def restore(self, point): ...

    def step(self, point, radius: float): ...


def _trust_region(problem, start, max_iter, tol, radius, min_radius, report):
    """Trust-region loop from one restored point; returns the best point reached."""
    best = start

    def better(cand, ref):
        return cand is not None and cand.objective < ref.objective - tol * max(1.0, abs(ref.objective))

    for _ in range(max_iter):
        report.iterations += 1
        cand, model_obj = problem.step(best, radius)
        if cand is None:
            radius *= 0.3
        else:
            predicted = best.objective - model_obj
            if predicted <= tol * max(1.0, abs(best.objective)):
                break
            new = problem.restore(cand)
            if better(new, best):
                actual = best.objective - new.objective
                best = new
                report.objective_trace.append(best.objective)
                if actual > 0.75 * predicted:
                    radius *= 2.0
            else:
                radius *= 0.3
        if radius < min_radius:
            break
    return best


def solve_bilinear_alternating(
    problem: BilinearProblem,
    warm_start,
    max_iter: int = 10,
    tol: float = 1e-6,
    radius: float = 0.5,
    min_radius: float = 1e-3,
    extra_starts=(),
    n_chains: int = 1,
):
    """Monotone multi-start trust-region scheme for the bilinear dual problems.

    ``warm_start`` must be a feasible point exposing ``.objective``; it is
    returned unchanged when ``max_iter == 0``. The warm start and every extra
    start are first restored exactly; the trust-region loop then runs from the
    ``n_chains`` best distinct restored points with ``max_iter`` steps each.
    Every accepted iterate comes out of ``problem.restore`` and is therefore
    feasible. The result is the restored warm start or a point with a lower
    objective.
    """
    report = AlternationReport(objective_trace=[warm_start.objective])
    if max_iter <= 0:
        report.converged = True
        report.fallback_used = True
        return warm_start, report

    restored = []
    for start in (warm_start, *extra_starts):
        cand = problem.restore(start)
        if cand is not None:
            restored.append(cand)
    if not restored:
        report.fallback_used = True
        return warm_start, report
    restored.sort(key=lambda c: c.objective)
    first = restored[0]
    if first.objective <= warm_start.objective:
        report.objective_trace.append(first.objective)
    chains = [first]
    for cand in restored[1:]:
        if len(chains) >= n_chains:
            break
        if cand.objective > first.objective + tol * max(1.0, abs(first.objective)) or len(chains) == 0:
            chains.append(cand)

    best = first if first.objective <= warm_start.objective else warm_start
    for start in chains:
        end = _trust_region(problem, start, max_iter, tol, radius, min_radius, report)
        if end.objective < best.objective:
            best = end
            report.objective_trace.append(best.objective)
    report.converged = True
    report.fallback_used = best is warm_start
    return best, report
