"""Shared oracles for the tube and closed-loop tests."""

import numpy as np

from dualmpc import sysid
from dualmpc.controller import HT
from dualmpc.geometry import HyperBox, Polytope, box_vertices, support_many
from dualmpc.sim import _uniform_in, piecewise_reference, sample_scenario

SETPOINTS = [((1.0, 0.5), 10), ((-1.5, -1.0), 10), ((1.5, 1.0), 10), ((-1.0, 0.0), 10), ((0.5, 0.5), 10)]


def collect_instances(setup, cfg, n_steps, seed, setpoints=SETPOINTS):
    """Solved tube problems along one closed-loop run: (ident, refs, StepResult)."""
    model = setup.model
    ref = piecewise_reference(setpoints, cfg.N, model)
    ctrl = setup.controller(cfg, np.unique(ref, axis=0))
    scen = sample_scenario(model, n_steps, seed, 0)
    ident = setup.identifier()
    x = scen.x0.copy()
    out = []
    prev = None
    for k in range(n_steps):
        if prev is not None:
            ident = sysid.observe(model, ident, *prev, x)
        refs = ref[k:k + cfg.N + 1]
        res = ctrl.step(ident, x, refs, k)
        out.append((ident, refs, res))
        prev = (x, res.u)
        x = model.step(scen.theta_star, x, res.u, scen.disturbances[k], check=False)
    return out


def cross_sections(off, tube, sol, refs, N):
    """``(H, h, centre)`` per stage: the set ``{H x <= h}`` and the feedback centre."""
    x = sol.x
    out = []
    for l in range(N + 1):
        if tube == HT:
            z, a = x[sol.layout["z"][l]], x[sol.layout["alpha"][l]]
            out.append((off.Hx, a + off.Hx @ z, refs[l] if l < N else z))
        else:
            h = x[sol.layout["h"][l]]
            out.append((off.Hx, h + off.Hx @ refs[l], refs[l]))
    return out


def sample_points(H, h, rng, n):
    P = Polytope(H, h, check=False)
    lo, hi = support_bounds(H, h, -1), support_bounds(H, h, 1)
    if np.any(hi - lo < 1e-9):  # section collapsed to a point or a segment
        return np.vstack([lo, hi])
    V = box_vertices(HyperBox(lo, hi))
    V = V[np.all(V @ H.T <= h + 1e-9, axis=1)]
    return np.vstack([V, _uniform_in(P, rng, n)])


def support_bounds(H, h, sign):
    """Upper (``sign=1``) or lower (``sign=-1``) coordinate bounds of ``{H x <= h}``."""
    return sign * support_many(H, h, sign * np.eye(H.shape[1]))[0]


def one_step_excess(model, off, tube, ident, refs, res, N, rng, n_samples=1000):
    """Largest violation of the successor cross-section and of terminal invariance."""
    sol = res.solution
    secs = cross_sections(off, tube, sol, refs, N)
    thetas = box_vertices(HyperBox.from_rhs(ident.h_theta))
    ws = model.W.vertices
    v = sol.v
    worst = -np.inf
    for l in range(N + 1):
        H, h, centre = secs[l]
        Hn, hn, _ = secs[min(l + 1, N)]
        xs = sample_points(H, h, rng, n_samples)
        for th in thetas:
            A, B = model.A_of(th), model.B_of(th)
            u = (model.K @ (xs - centre).T).T + v[l]
            for w in ws:
                xn = xs @ A.T + u @ B.T + w
                worst = max(worst, float(np.max(xn @ Hn.T - hn)))
    return worst


CRITERIA: dict = {}


def report(number, ok, detail):
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return ok
