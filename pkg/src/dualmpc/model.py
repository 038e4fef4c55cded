"""Uncertain linear plant ``x+ = A(theta) x + B(theta) u + w`` and its regressors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import AssumptionError, GeometryError, HyperBox, Polytope, box_vertices

MAX_PARAMS = 16
MAX_STATES = 32


class ContractViolation(ValueError):
    """A simulated disturbance or parameter left its admissible set."""


@dataclass(frozen=True)
class Regressor:
    """``D`` stacks ``A_i x + B_i u`` column-wise, ``d = A0 x + B0 u - z_next``."""

    D: np.ndarray
    d: np.ndarray


class UncertainModel:
    """Plant matrices, stabilising gain, constraint rows and uncertainty sets.

    ``A`` has shape ``(p+1, n, n)`` and ``B`` shape ``(p+1, n, m)``; index 0 is
    the nominal part. Constraints are ``F x + G u <= 1``.
    """

    def __init__(self, A, B, K, F, G, theta_set: Polytope, disturbance_set: Polytope, check=True):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        if A.ndim != 3 or B.ndim != 3 or A.shape[0] != B.shape[0]:
            raise ValueError("A and B must be stacks of p+1 matrices")
        self.A = A
        self.B = B
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.F = np.atleast_2d(np.asarray(F, dtype=float))
        self.G = np.atleast_2d(np.asarray(G, dtype=float))
        self.theta_set = theta_set
        self.W = disturbance_set
        for arr in (self.A, self.B, self.K, self.F, self.G):
            arr.setflags(write=False)
        self._validate_shapes()
        self.theta_vertices = self._theta_vertices()
        if check:
            self._check_assumptions()

    # dimensions -----------------------------------------------------------
    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[2]

    @property
    def p(self) -> int:
        return self.A.shape[0] - 1

    @property
    def n_theta(self) -> int:
        return self.theta_set.H.shape[0]

    @property
    def n_w(self) -> int:
        return self.W.H.shape[0]

    @property
    def n_c(self) -> int:
        return self.F.shape[0]

    def _validate_shapes(self):
        n, m, p = self.n, self.m, self.p
        if self.A.shape[1:] != (n, n):
            raise ValueError("A_i must be square")
        if self.B.shape[1] != n:
            raise ValueError("B_i must have n rows")
        if p > MAX_PARAMS or n > MAX_STATES:
            raise ValueError(f"model too large (p <= {MAX_PARAMS}, n <= {MAX_STATES})")
        if self.K.shape != (m, n):
            raise ValueError(f"K must be {m}x{n}, got {self.K.shape}")
        if self.F.shape[1] != n or self.G.shape != (self.F.shape[0], m):
            raise ValueError("F must be n_c x n and G n_c x m")
        if self.theta_set.dim != p:
            raise ValueError(f"parameter set has dimension {self.theta_set.dim}, expected {p}")
        if self.W.dim != n:
            raise ValueError(f"disturbance set has dimension {self.W.dim}, expected {n}")

    def _theta_vertices(self):
        if self.theta_set.vertices is not None:
            return self.theta_set.vertices
        if HyperBox.is_box_matrix(self.theta_set.H):
            return box_vertices(HyperBox.from_rhs(self.theta_set.h))
        return None

    def _check_assumptions(self):
        try:
            Polytope(np.hstack([self.F, self.G]), np.ones(self.n_c))
        except GeometryError as exc:
            raise GeometryError(f"constraint set F x + G u <= 1 is not compact: {exc}") from None
        if self.theta_vertices is None:
            return
        for j, th in enumerate(self.theta_vertices):
            rho = max(abs(np.linalg.eigvals(self.closed_loop(th))))
            if rho >= 1.0:
                raise AssumptionError(
                    f"K does not stabilise A(theta) + B(theta) K at parameter vertex {j} "
                    f"{th.tolist()} (spectral radius {rho:.4g})"
                )

    # matrices -------------------------------------------------------------
    def A_of(self, theta) -> np.ndarray:
        return self.A[0] + np.tensordot(np.asarray(theta, dtype=float), self.A[1:], axes=1)

    def B_of(self, theta) -> np.ndarray:
        return self.B[0] + np.tensordot(np.asarray(theta, dtype=float), self.B[1:], axes=1)

    def closed_loop(self, theta) -> np.ndarray:
        return self.A_of(theta) + self.B_of(theta) @ self.K

    def regressor(self, x, u, z_next) -> Regressor:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        D = (self.A[1:] @ x + self.B[1:] @ u).T
        d = self.A[0] @ x + self.B[0] @ u - np.asarray(z_next, dtype=float)
        return Regressor(D.reshape(self.n, self.p), d)

    def step(self, theta, x, u, w, check=True) -> np.ndarray:
        if check:
            if not self.W.contains(w):
                raise ContractViolation(f"disturbance {np.asarray(w).tolist()} outside W")
            if not self.theta_set.contains(theta):
                raise ContractViolation(f"parameter {np.asarray(theta).tolist()} outside Theta")
        return self.A_of(theta) @ x + self.B_of(theta) @ u + np.asarray(w, dtype=float)

    def equilibrium_input(self, theta, r, r_next=None) -> np.ndarray:
        """Input with ``A(theta) r + B(theta) u = r_next`` (least squares if tall)."""
        r = np.asarray(r, dtype=float)
        r_next = r if r_next is None else np.asarray(r_next, dtype=float)
        rhs = r_next - self.A_of(theta) @ r
        u, *_ = np.linalg.lstsq(self.B_of(theta), rhs, rcond=None)
        return u
