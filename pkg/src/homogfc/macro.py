"""Homogenized system on a periodic macro box.

    c_eff dT0/dt = div(lambda_eff grad T0),   |Y_g| dC0/dt = div(D_eff grad C0)

Finite volumes on an N x N node grid, implicit Euler with tensors lagged from
the previous step.  Diagonal tensor entries act on face differences (5-point
stencil), off-diagonal entries act on corner gradients.  Both pieces are of the
form G^T K G, so constants are in the left kernel (exact conservation) and the
form is nonnegative whenever the corner tensors have a PSD symmetric part.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.ndimage import map_coordinates

from .errors import ConfigError, InvariantViolation, NumericalError

log = logging.getLogger(__name__)

MASS_TOL = 1e-12
NORM_TOL = 1e-12


@dataclass
class MacroState:
    T0: np.ndarray          # (N, N), index [ix, iy]
    C0: np.ndarray
    t: float = 0.0

    def copy(self):
        return MacroState(self.T0.copy(), self.C0.copy(), self.t)


@dataclass(frozen=True)
class MacroGrid:
    N: int
    L: float = 1.0

    @property
    def h(self):
        return self.L / self.N

    @property
    def nodes(self):
        return np.arange(self.N) * self.h

    def mesh(self):
        return np.meshgrid(self.nodes, self.nodes, indexing="ij")


def evaluate_profile(spec, X, Y, L, name):
    kind = spec.get("type", "constant")
    if kind == "constant":
        return np.full(X.shape, float(spec.get("value", 1.0)))
    if kind == "gaussian":
        c = spec.get("center", [L / 2, L / 2])
        w = float(spec.get("width", 0.1))
        amp = float(spec.get("amplitude", 1.0))
        floor = float(spec.get("floor", 0.0))
        # nearest periodic image
        dx = (X - c[0] + L / 2) % L - L / 2
        dy = (Y - c[1] + L / 2) % L - L / 2
        return floor + amp * np.exp(-(dx**2 + dy**2) / (2 * w**2))
    if kind == "gaussian_periodic":
        return periodic_gaussian(X, Y, L, spec.get("center", [L / 2, L / 2]),
                                 float(spec.get("width", 0.1)), float(spec.get("amplitude", 1.0)),
                                 float(spec.get("floor", 0.0)))
    raise ConfigError(f"unknown initial profile type {kind!r} for {name}")


def periodic_gaussian(X, Y, L, center, width, amplitude=1.0, floor=0.0, kappa=0.0, t=0.0,
                      images=3):
    """Image sum of a Gaussian; with kappa > 0 it is the exact heat-kernel evolution."""
    s2 = width**2 + 2.0 * kappa * t
    out = np.zeros(np.shape(X))
    for p in range(-images, images + 1):
        for q in range(-images, images + 1):
            out += np.exp(-((X - center[0] - p * L) ** 2 + (Y - center[1] - q * L) ** 2) / (2 * s2))
    return floor + amplitude * width**2 / s2 * out


def init_macro(grid: MacroGrid, T_profile: dict, C_profile: dict) -> MacroState:
    X, Y = grid.mesh()
    T = evaluate_profile(T_profile, X, Y, grid.L, "T0")
    C = evaluate_profile(C_profile, X, Y, grid.L, "C0")
    if not (np.isfinite(T).all() and np.isfinite(C).all()):
        raise ConfigError("initial profiles must be finite per (H3)")
    if T.min() <= 0:
        raise ConfigError(f"initial T0 must be > 0 per (H3); minimum is {T.min():.6g}")
    if C.min() < 0:
        raise ConfigError(f"initial C0 must be >= 0 per (H3); minimum is {C.min():.6g}")
    return MacroState(T, C, 0.0)


def _periodic_diff(N):
    return (sp.eye(N, k=1) + sp.eye(N, k=-(N - 1)) - sp.eye(N)).tocsr()


def _periodic_avg(N):
    return 0.5 * (sp.eye(N) + sp.eye(N, k=1) + sp.eye(N, k=-(N - 1))).tocsr()


class MacroOperators:
    """Grid difference operators; tensor weights are applied per step."""

    def __init__(self, grid: MacroGrid):
        N, h = grid.N, grid.h
        I, D1, S1 = sp.identity(N, format="csr"), _periodic_diff(N), _periodic_avg(N)
        self.grid = grid
        self.Dx = sp.kron(D1, I, format="csr")          # face (i+1/2, j)
        self.Dy = sp.kron(I, D1, format="csr")          # face (i, j+1/2)
        self.Gx = sp.kron(D1, S1, format="csr") / h     # corner (i+1/2, j+1/2)
        self.Gy = sp.kron(S1, D1, format="csr") / h

    def operator(self, K_nodes: np.ndarray) -> sp.csr_matrix:
        """Discrete -div(K grad .) times the cell area, from nodal tensors (N, N, 2, 2)."""
        h = self.grid.h
        Kc = 0.25 * (K_nodes + np.roll(K_nodes, -1, 0) + np.roll(K_nodes, -1, 1)
                     + np.roll(np.roll(K_nodes, -1, 0), -1, 1))
        kx = 0.5 * (Kc[..., 0, 0] + np.roll(Kc[..., 0, 0], 1, 1))
        ky = 0.5 * (Kc[..., 1, 1] + np.roll(Kc[..., 1, 1], 1, 0))
        A = (self.Dx.T @ sp.diags(kx.ravel()) @ self.Dx + self.Dy.T @ sp.diags(ky.ravel()) @ self.Dy)
        k12, k21 = Kc[..., 0, 1].ravel(), Kc[..., 1, 0].ravel()
        if np.any(k12) or np.any(k21):
            A = A + h * h * (self.Gx.T @ sp.diags(k12) @ self.Gy + self.Gy.T @ sp.diags(k21) @ self.Gx)
        return A.tocsc()


def shift_field(u: np.ndarray, shift, L: float) -> np.ndarray:
    """Periodic bilinear sample of u at x + shift (shift in physical units)."""
    N = u.shape[0]
    s = np.asarray(shift, float) / (L / N)
    if not np.any(s):
        return u
    ii, jj = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    return map_coordinates(u, [ii + s[0], jj + s[1]], order=1, mode="grid-wrap")


@dataclass
class MacroSettings:
    dt: float
    c_eff: float
    gas_area: float
    drift_offset: tuple = (0.0, 0.0)    # b_T - b_C
    epsilon: float = 1.0
    frames: str = "offset"              # or "identified"


class MacroSolver:
    def __init__(self, grid: MacroGrid, table, settings: MacroSettings):
        if not settings.dt > 0:
            raise ConfigError(f"macro dt must be > 0, got {settings.dt}")
        if settings.frames not in ("offset", "identified"):
            raise ConfigError(f"frames must be 'offset' or 'identified', got {settings.frames!r}")
        self.grid, self.table, self.s = grid, table, settings
        self.ops = MacroOperators(grid)
        self._cache = {}

    def _frame_shift(self, t):
        if self.s.frames == "identified":
            return np.zeros(2)
        return np.asarray(self.s.drift_offset, float) * t / self.s.epsilon

    def _factor(self, key, K, coeff):
        hit = self._cache.get(key)
        if hit is not None and np.array_equal(hit[0], K):
            return hit[1]
        h2 = self.grid.h ** 2
        M = coeff * h2 * sp.identity(self.grid.N ** 2, format="csc") + self.s.dt * self.ops.operator(K)
        try:
            lu = spla.splu(M.tocsc())
        except RuntimeError as exc:
            raise NumericalError(f"macro linear solve failed: {exc}") from exc
        self._cache[key] = (K.copy(), lu)
        return lu

    def step(self, state: MacroState) -> MacroState:
        shift = self._frame_shift(state.t)
        # T frame sees C0 at x + (b_T - b_C) t/eps; C frame sees T0 at x - (...)
        C_in_T = shift_field(state.C0, shift, self.grid.L)
        T_in_C = shift_field(state.T0, -shift, self.grid.L)
        if state.T0.min() <= 0 or T_in_C.min() <= 0:
            raise InvariantViolation(f"T0 lost positivity at t={state.t:.6g} (min {state.T0.min():.3e})")
        lam, _ = self.table.interpolate(state.T0, np.maximum(C_in_T, 0.0))
        _, D = self.table.interpolate(T_in_C, np.maximum(state.C0, 0.0))
        h2 = self.grid.h ** 2
        N = self.grid.N
        luT = self._factor("T", lam, self.s.c_eff)
        luC = self._factor("C", D, self.s.gas_area)
        T = luT.solve(self.s.c_eff * h2 * state.T0.ravel()).reshape(N, N)
        C = luC.solve(self.s.gas_area * h2 * state.C0.ravel()).reshape(N, N)
        if not (np.isfinite(T).all() and np.isfinite(C).all()):
            raise NumericalError(f"non-finite macro state at t={state.t:.6g}; reduce dt")
        return MacroState(T, C, state.t + self.s.dt)


def l2(u, grid):
    return float(np.sqrt(grid.h ** 2 * np.sum(u * u)))


def mass(u, grid):
    return float(grid.h ** 2 * np.sum(u))


def step_macro(state, table, grid, settings: MacroSettings, solver: MacroSolver | None = None):
    solver = solver or MacroSolver(grid, table, settings)
    return solver.step(state)


@dataclass
class MacroTrajectory:
    grid: MacroGrid
    snapshots: list
    diagnostics: dict = dc_field(default_factory=dict)

    def at(self, t):
        return min(self.snapshots, key=lambda s: abs(s.t - t))


def run_macro(state: MacroState, table, grid: MacroGrid, settings: MacroSettings, n_steps: int,
              snapshot_every: int | None = None, strict: bool = True) -> MacroTrajectory:
    """Advance n_steps; record L2 norms, mass and minima each step."""
    solver = MacroSolver(grid, table, settings)
    snaps = [state.copy()]
    diag = {"t": [state.t], "L2_T": [l2(state.T0, grid)], "L2_C": [l2(state.C0, grid)],
            "mass_C": [mass(state.C0, grid)], "mass_T": [mass(state.T0, grid)],
            "min_T": [float(state.T0.min())], "min_C": [float(state.C0.min())],
            "dt": settings.dt, "max_mass_drift": 0.0, "max_norm_increase": 0.0}
    every = snapshot_every or max(n_steps, 1)
    for k in range(1, n_steps + 1):
        new = solver.step(state)
        m0, m1 = mass(state.C0, grid), mass(new.C0, grid)
        drift = abs(m1 - m0) / max(abs(m0), 1e-300)
        inc = max(l2(new.T0, grid) - l2(state.T0, grid), l2(new.C0, grid) - l2(state.C0, grid))
        inc_rel = inc / max(l2(state.T0, grid), l2(state.C0, grid), 1e-300)
        diag["max_mass_drift"] = max(diag["max_mass_drift"], drift)
        diag["max_norm_increase"] = max(diag["max_norm_increase"], inc_rel)
        if strict and drift > MASS_TOL:
            raise InvariantViolation(f"C0 mass drift {drift:.3e} at step {k}")
        if strict and inc_rel > NORM_TOL:
            raise InvariantViolation(f"L2 norm increased by {inc_rel:.3e} at step {k}")
        if new.C0.min() < 0:
            log.warning("C0 undershoot %.3e at step %d", new.C0.min(), k)
        state = new
        for key, val in (("t", state.t), ("L2_T", l2(state.T0, grid)), ("L2_C", l2(state.C0, grid)),
                         ("mass_C", m1), ("mass_T", mass(state.T0, grid)),
                         ("min_T", float(state.T0.min())), ("min_C", float(state.C0.min()))):
            diag[key].append(val)
        if k % every == 0 or k == n_steps:
            snaps.append(state.copy())
    return MacroTrajectory(grid, snaps, diag)
