"""Closed-loop runs, reference generation and paired Monte-Carlo experiments."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import sysid
from .controller import FT, HT, Controller, ControllerConfig, ConfigurationError, InfeasibleError
from .geometry import HyperBox, Polytope, support_many, verify_contractivity
from .tube_ft import ft_offline
from .tube_ht import ht_offline

log = logging.getLogger(__name__)

CHECK_TOL = 1e-8
SHIFT_TOL = 1e-7


@dataclass(frozen=True)
class Scenario:
    theta_star: np.ndarray
    disturbances: np.ndarray  # (T, n)
    x0: np.ndarray
    seed: tuple  # (base_seed, index)


def scenario_rng(base_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream: the scenario depends only on ``(base_seed, index)``."""
    return np.random.Generator(np.random.Philox(key=[int(base_seed), int(index)]))


def _uniform_in(P: Polytope, rng, size) -> np.ndarray:
    """Uniform samples by rejection from the bounding box (exact for boxes)."""
    d = P.dim
    lo = -support_many(P.H, P.h, -np.eye(d))[0]
    hi = support_many(P.H, P.h, np.eye(d))[0]
    out = np.empty((size, d))
    got = 0
    while got < size:
        cand = rng.uniform(lo, hi, size=(max(2 * (size - got), 16), d))
        ok = cand[np.all(cand @ P.H.T <= P.h, axis=1)]
        take = ok[: size - got]
        out[got:got + len(take)] = take
        got += len(take)
    return out


def sample_scenario(model, T: int, base_seed: int, index: int, x0=None) -> Scenario:
    rng = scenario_rng(base_seed, index)
    theta = _uniform_in(model.theta_set, rng, 1)[0]
    w = _uniform_in(model.W, rng, T)
    x0 = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
    return Scenario(theta, w, x0, (int(base_seed), int(index)))


def piecewise_reference(setpoints, N: int, model=None) -> np.ndarray:
    """Concatenate ``(state, duration)`` segments and pad ``N`` copies of the last setpoint.

    With ``model`` given, every setpoint must lie strictly inside the state
    constraints (the rows of ``F x + G u <= 1`` that do not involve ``u``).
    """
    segs = []
    for state, duration in setpoints:
        r = np.asarray(state, dtype=float)
        if int(duration) < 1:
            raise ConfigurationError(f"setpoint {r.tolist()} has duration {duration}; durations must be positive")
        if model is not None:
            rows = ~np.any(model.G != 0, axis=1)
            if np.any(model.F[rows] @ r >= 1.0):
                raise ConfigurationError(f"setpoint {r.tolist()} is not strictly inside the state constraints")
        segs.append(np.tile(r, (int(duration), 1)))
    if not segs:
        raise ConfigurationError("the reference needs at least one setpoint")
    ref = np.vstack(segs)
    return np.vstack([ref, np.tile(ref[-1], (N, 1))])


def switch_indices(setpoints) -> list[int]:
    """Time steps at which a new segment starts (the first one excluded)."""
    return [int(k) for k in np.cumsum([int(d) for _, d in setpoints])[:-1]]


def true_setpoint_inputs(model, theta_star, reference) -> np.ndarray:
    """Equilibrium input of the true system for every reference sample."""
    out = np.zeros((len(reference), model.m))
    cache: dict = {}
    for t, r in enumerate(reference):
        key = r.tobytes()
        if key not in cache:
            cache[key] = model.equilibrium_input(theta_star, r)
        out[t] = cache[key]
    return out


def stage_costs(x, u, r, u_star, Q, R) -> np.ndarray:
    """``||Q(x_t - r_t)||_inf + ||R(u_t - u*_t)||_inf`` for ``t < T``."""
    T = len(u)
    ex = (np.atleast_2d(Q) @ (x[:T] - r[:T]).T).T
    eu = (np.atleast_2d(R) @ (u - u_star[:T]).T).T
    return np.max(np.abs(ex), axis=1) + np.max(np.abs(eu), axis=1)


@dataclass
class SimRecord:
    controller: str
    seed: tuple
    x: np.ndarray  # (T+1, n)
    u: np.ndarray  # (T, m)
    r: np.ndarray  # (T, n)
    u_star: np.ndarray  # (T, m)
    stage_cost: np.ndarray  # (T,)
    h_theta: np.ndarray  # (T, n_theta) set used at step k
    theta_bar: np.ndarray  # (T, p)
    objective: np.ndarray
    iterations: np.ndarray
    solve_ms: np.ndarray
    shift_residual: np.ndarray  # nan at k = 0
    steps: int = 0
    feasible: bool = True
    failure: str = ""
    failed_at: int = -1
    theta_excluded: int = 0
    monotone_violations: int = 0
    constraint_excess: float = -np.inf  # max of F x + G u - 1 over realised pairs

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.stage_cost[: self.steps])) if self.feasible else float("nan")

    @property
    def shift_violations(self) -> int:
        res = self.shift_residual[1: self.steps]
        return int(np.sum(res > SHIFT_TOL))


@dataclass
class Setup:
    """Model, offline data and identifier options shared by all controllers."""

    model: object
    X0: Polytope
    theta_bar0: np.ndarray
    tau: int = 1
    lms_gain: float = 0.1
    mu_ft: float = 1.0
    lambda_c: float = field(init=False)
    _offline: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.theta_bar0 = np.asarray(self.theta_bar0, dtype=float)
        self.lambda_c = verify_contractivity(self.model, self.X0, self.model.theta_vertices)

    @property
    def box_mode(self) -> bool:
        return HyperBox.is_box_matrix(self.model.theta_set.H)

    def offline(self, tube: str, Q, R, refs=()):
        if tube == HT:
            if HT not in self._offline:
                self._offline[HT] = ht_offline(self.model, self.X0)
            return self._offline[HT]
        key = (FT, np.asarray(Q, float).tobytes(), np.asarray(R, float).tobytes())
        if key not in self._offline:
            self._offline[key] = ft_offline(self.model, self.X0.H, self.model.theta_vertices, Q, R, self.mu_ft)
        off = self._offline[key]
        for r in refs:
            off.at(r)
        return off

    def controller(self, cfg: ControllerConfig, refs=()) -> Controller:
        return Controller(self.model, cfg, self.offline(cfg.tube, cfg.Q, cfg.R, refs), self.lambda_c)

    def identifier(self):
        return sysid.initial_state(self.model, self.theta_bar0, self.tau, self.box_mode, self.lms_gain)


def run_closed_loop(setup: Setup, cfg: ControllerConfig, scenario: Scenario, reference, T=None) -> SimRecord:
    """Measure, identify, solve, apply and step the true system for ``T`` steps."""
    model = setup.model
    N = cfg.N
    reference = np.asarray(reference, dtype=float)
    T = len(scenario.disturbances) if T is None else int(T)
    if len(reference) < T + N:
        raise ConfigurationError(f"reference has {len(reference)} samples, needs T + N = {T + N}")
    ctrl = setup.controller(cfg, np.unique(reference[:T + N], axis=0))
    theta_star = scenario.theta_star
    u_star = true_setpoint_inputs(model, theta_star, reference[:T])
    n, m, nth = model.n, model.m, model.n_theta
    rec = SimRecord(
        cfg.name, scenario.seed,
        x=np.full((T + 1, n), np.nan), u=np.full((T, m), np.nan), r=reference[:T].copy(), u_star=u_star,
        stage_cost=np.full(T, np.nan), h_theta=np.full((T, nth), np.nan), theta_bar=np.full((T, model.p), np.nan),
        objective=np.full(T, np.nan), iterations=np.zeros(T, dtype=int), solve_ms=np.full(T, np.nan),
        shift_residual=np.full(T, np.nan),
    )
    H_theta = model.theta_set.H
    ident = setup.identifier()
    x = scenario.x0.copy()
    rec.x[0] = x
    h_prev = ident.h_theta
    for k in range(T):
        if k > 0:
            try:
                ident = sysid.observe(model, ident, rec.x[k - 1], rec.u[k - 1], x)
            except sysid.ModelFalsified as err:
                rec.feasible, rec.failure, rec.failed_at = False, f"identification: {err}", k
                break
        rec.h_theta[k] = ident.h_theta
        rec.theta_bar[k] = ident.theta_bar
        if np.any(H_theta @ theta_star > ident.h_theta + CHECK_TOL):
            rec.theta_excluded += 1
        if np.any(ident.h_theta > h_prev + CHECK_TOL):
            rec.monotone_violations += 1
        h_prev = ident.h_theta
        try:
            res = ctrl.step(ident, x, reference[k:k + N + 1], k)
        except InfeasibleError as err:
            rec.feasible, rec.failure, rec.failed_at = False, str(err), k
            if k > 0:
                log.error("%s seed %s: infeasible at k=%d after a feasible start: %s", cfg.name, scenario.seed, k, err)
            break
        u = res.u
        rec.u[k] = u
        rec.objective[k] = res.objective
        rec.iterations[k] = res.report.iterations
        rec.solve_ms[k] = res.solve_ms
        rec.shift_residual[k] = res.shift_residual
        rec.constraint_excess = max(rec.constraint_excess, float(np.max(model.F @ x + model.G @ u - 1.0)))
        x = model.step(theta_star, x, u, scenario.disturbances[k], check=False)
        rec.x[k + 1] = x
        rec.steps = k + 1
    rec.stage_cost[: rec.steps] = stage_costs(rec.x[: rec.steps + 1], rec.u[: rec.steps], rec.r, u_star, cfg.Q, cfg.R)
    return rec


@dataclass
class ExperimentResult:
    configs: list
    records: dict  # controller name -> list of SimRecord, ordered by scenario index

    def costs(self, name) -> np.ndarray:
        return np.array([r.total_cost for r in self.records[name]])

    def failures(self, name) -> int:
        return sum(not r.feasible for r in self.records[name])

    def summary(self) -> dict:
        out = {}
        for cfg in self.configs:
            recs = self.records[cfg.name]
            c = self.costs(cfg.name)
            ok = c[np.isfinite(c)]
            ms = np.concatenate([r.solve_ms[: r.steps] for r in recs]) if recs else np.zeros(0)
            stats = dict(zip(("min", "q1", "median", "q3", "max"), np.percentile(ok, [0, 25, 50, 75, 100]).tolist())) if ok.size else {}
            out[cfg.name] = {
                "tube": cfg.tube,
                "mode": cfg.mode,
                "n": len(recs),
                "infeasible": self.failures(cfg.name),
                "infeasible_at_start": sum(r.failed_at == 0 for r in recs),
                "mean_cost": float(np.mean(ok)) if ok.size else None,
                **stats,
                "mean_solve_ms": float(np.mean(ms)) if ms.size else None,
                "theta_excluded": sum(r.theta_excluded for r in recs),
                "monotone_violations": sum(r.monotone_violations for r in recs),
                "shift_violations": sum(r.shift_violations for r in recs),
                "max_constraint_excess": max((r.constraint_excess for r in recs), default=None),
            }
        return out


def _run_scenario(args):
    setup, configs, T, base_seed, index, reference, x0 = args
    scen = sample_scenario(setup.model, T, base_seed, index, x0)
    return index, [run_closed_loop(setup, cfg, scen, reference, T) for cfg in configs]


def monte_carlo(setup: Setup, configs, n_realizations: int, T: int, base_seed: int, reference, workers: int = 1,
                progress=None, x0=None) -> ExperimentResult:
    """Run every controller on the same ``n_realizations`` scenarios.

    Each controller's terminal weight uses the experiment length ``T``. The
    reference holds its last setpoint beyond the listed segments.
    Results are ordered by scenario index whatever the number of workers.
    """
    configs = [replace(cfg, T=T) for cfg in configs]
    jobs = [(setup, configs, T, base_seed, i, reference, x0) for i in range(n_realizations)]
    out: dict = {}
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for index, recs in pool.map(_run_scenario, jobs):
                out[index] = recs
                if progress:
                    progress(index, recs, time.perf_counter() - t0)
    else:
        for job in jobs:
            index, recs = _run_scenario(job)
            out[index] = recs
            if progress:
                progress(index, recs, time.perf_counter() - t0)
    records = {cfg.name: [out[i][j] for i in range(n_realizations)] for j, cfg in enumerate(configs)}
    result = ExperimentResult(configs, records)
    for cfg in configs:
        bad = result.failures(cfg.name)
        if bad:
            log.warning("%s: %d of %d runs infeasible and excluded from the cost statistics", cfg.name, bad, n_realizations)
    return result


# ----------------------------------------------------------------------
# file output


def _fmt(v) -> str:
    return repr(float(v))


def write_costs_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scenario", "base_seed", "controller", "cost", "feasible", "failed_at"])
        for cfg in result.configs:
            for i, r in enumerate(result.records[cfg.name]):
                wr.writerow([i, r.seed[0], cfg.name, _fmt(r.total_cost), int(r.feasible), r.failed_at])


def write_timing_csv(result: ExperimentResult, path) -> None:
    """Wall-clock solve times, kept apart so the other files are reproducible byte for byte."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scenario", "controller", "mean_solve_ms", "max_solve_ms"])
        for cfg in result.configs:
            for i, r in enumerate(result.records[cfg.name]):
                ms = r.solve_ms[: r.steps]
                wr.writerow([i, cfg.name, _fmt(np.mean(ms)) if ms.size else "nan", _fmt(np.max(ms)) if ms.size else "nan"])


def write_trace_csv(rec: SimRecord, path) -> None:
    n, m, nth = rec.x.shape[1], rec.u.shape[1], rec.h_theta.shape[1]
    head = (["k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + [f"r{i}" for i in range(n)]
            + [f"h_theta{i}" for i in range(nth)] + ["stage_cost", "iterations"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(head)
        for k in range(rec.steps):
            wr.writerow([k, *map(_fmt, rec.x[k]), *map(_fmt, rec.u[k]), *map(_fmt, rec.r[k]),
                         *map(_fmt, rec.h_theta[k]), _fmt(rec.stage_cost[k]), int(rec.iterations[k])])


def write_outputs(result: ExperimentResult, out_dir, extra: dict | None = None) -> dict:
    """costs.csv, timing.csv, one trace per run and summary.json (no timings in it)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_costs_csv(result, out_dir / "costs.csv")
    write_timing_csv(result, out_dir / "timing.csv")
    for cfg in result.configs:
        for r in result.records[cfg.name]:
            write_trace_csv(r, out_dir / f"trace_{r.seed[1]}_{cfg.name}.csv")
    summary = result.summary()
    stable = {name: {k: v for k, v in row.items() if k != "mean_solve_ms"} for name, row in summary.items()}
    (out_dir / "summary.json").write_text(json.dumps({"controllers": stable, **(extra or {})}, indent=2,
                                                     default=_json_default))
    return summary


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj).__name__)
