"""Set-membership parameter bounds and LMS point estimate."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .geometry import support_many
from .optim import LinearProgram, solve_lp


class ModelFalsified(RuntimeError):
    """The data are inconsistent with every parameter in the current set."""


Transition = tuple  # (x, u, x_next)


@dataclass(frozen=True)
class IdentState:
    h_theta: np.ndarray
    theta_bar: np.ndarray
    window: tuple = ()
    tau: int = 1
    box_mode: bool = False
    lms_gain: float = 0.1  # mu = lms_gain / max ||D||_F^2 over the window

    def push(self, x, u, x_next) -> "IdentState":
        buf = deque(self.window, maxlen=self.tau)
        buf.append((np.asarray(x, float).copy(), np.asarray(u, float).copy(), np.asarray(x_next, float).copy()))
        return replace(self, window=tuple(buf))


def initial_state(model, theta_bar0, tau=1, box_mode=False, lms_gain=0.1) -> IdentState:
    h0 = np.array(model.theta_set.h, dtype=float)
    tb = project(np.asarray(theta_bar0, float), model.theta_set.H, h0, box_mode)
    return IdentState(h0, tb, (), int(tau), bool(box_mode), float(lms_gain))


def nonfalsified_set(model, window):
    """Rows ``H_delta theta <= h_delta`` of the parameters consistent with ``window``."""
    Hw, hw = model.W.H, model.W.h
    if not window:
        return np.zeros((0, model.p)), np.zeros(0)
    Hs, hs = [], []
    for x, u, x_next in window:
        reg = model.regressor(x, u, x_next)
        Hs.append(-Hw @ reg.D)
        hs.append(hw + Hw @ reg.d)
    return np.vstack(Hs), np.concatenate(hs)


def tighten(H_theta, h_old, H_delta, h_delta):
    """Row-wise maxima of ``H_theta theta`` over ``Theta_old`` cut by the data rows."""
    out = support_many(np.vstack([H_theta, H_delta]), np.concatenate([h_old, h_delta]), H_theta)
    if out is None:
        return None
    return np.minimum(out[0], h_old)


def update_set(model, state: IdentState, window=None) -> IdentState:
    window = state.window if window is None else window
    H_d, h_d = nonfalsified_set(model, window)
    if H_d.shape[0] == 0 or not np.any(H_d):
        return state
    h_new = tighten(model.theta_set.H, state.h_theta, H_d, h_d)
    if h_new is None:
        raise ModelFalsified("parameter set became empty: the disturbance or parameter bound was violated")
    return replace(state, h_theta=h_new)


def project(theta, H, h, box_mode=False):
    """Infinity-norm projection onto ``{H theta <= h}`` (clipping for boxes)."""
    theta = np.asarray(theta, dtype=float)
    if np.all(H @ theta <= h):
        return theta.copy()
    p = theta.size
    if box_mode:
        return np.clip(theta, -h[p:], h[:p])
    # min t  s.t.  H th <= h,  -t <= th - theta <= t
    I = np.eye(p)
    A = np.block([[H, np.zeros((H.shape[0], 1))], [I, -np.ones((p, 1))], [-I, -np.ones((p, 1))]])
    b = np.concatenate([h, theta, -theta])
    c = np.zeros(p + 1)
    c[-1] = 1.0
    res = solve_lp(LinearProgram(c, A, b))
    if not res.ok:
        raise ModelFalsified("cannot project the estimate onto an empty parameter set")
    return res.x[:p]


def update_estimate(model, state: IdentState, x, u, x_next) -> IdentState:
    reg = model.regressor(x, u, x_next)
    D = reg.D
    nrm = float(np.sum(D * D))
    for xw, uw, xnw in state.window:
        nrm = max(nrm, float(np.sum(model.regressor(xw, uw, xnw).D ** 2)))
    theta = state.theta_bar
    if nrm > 1e-12:
        err = x_next - model.A_of(theta) @ x - model.B_of(theta) @ u
        theta = theta + (state.lms_gain / nrm) * (D.T @ err)
    theta = project(theta, model.theta_set.H, state.h_theta, state.box_mode)
    return replace(state, theta_bar=theta)


def observe(model, state: IdentState, x, u, x_next) -> IdentState:
    """Record one transition, tighten the set and refresh the estimate."""
    state = state.push(x, u, x_next)
    state = update_set(model, state)
    return update_estimate(model, state, x, u, x_next)
