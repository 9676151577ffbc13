"""Direct epsilon-scale simulation on the unit torus tiled by n x n cells.

With x = eps y, every cell operator keeps its value except the mass matrix
(factor eps^2): stiffness, the 1/eps convection and the 1/eps interface
reaction are scale invariant in 2D.  The micro operators are therefore the
cell triplets copied onto every tile.

Time stepping (backward Euler, reaction linear in C with f(T) lagged):

    (M_g/dt + K_D + B_g + R_gg) C+ = M_g C/dt
    (M_c/dt + K_lam + c_g B) T+  = M_c T/dt + Q R_fg C+

where R carries the weight A f(T) at the interface Gauss points.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.ndimage import map_coordinates

from . import fem
from .errors import ConfigError, NumericalError
from .geometry import PeriodicMesh
from .kinetics import KineticsParams, arrhenius_f

log = logging.getLogger(__name__)

ENERGY_TOL = 1e-8
RESIDUAL_TOL = 1e-8


class TiledMesh:
    """Index bookkeeping for n x n copies of a cell mesh scaled by eps = 1/n."""

    def __init__(self, mesh: PeriodicMesh, n: int):
        if int(n) != n or n < 1:
            raise ConfigError(f"number of cells per side must be a positive integer, got {n}")
        self.mesh, self.n = mesh, int(n)
        self.eps = 1.0 / self.n
        P, Q = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="ij")
        self.P, self.Q = P.ravel(), Q.ravel()
        self.n_full = mesh.n_dof * self.n**2
        self.n_gas = mesh.n_gas_dof * self.n**2
        N, Ng = mesh.n_dof, mesh.n_gas_dof
        base = mesh.dof_coordinates
        self.full_coords = ((base[None] + np.stack([self.P, self.Q], 1)[:, None]) / self.n).reshape(-1, 2)
        gbase = mesh.gas_dof_coordinates
        self.gas_coords = ((gbase[None] + np.stack([self.P, self.Q], 1)[:, None]) / self.n).reshape(-1, 2)
        self._N, self._Ng = N, Ng

    def tile_index(self, verts):
        """(n^2, len(verts)) tile number of each vertex copy."""
        s = self.mesh.shift[verts]
        n = self.n
        return ((self.P[:, None] + s[None, :, 0]) % n) * n + (self.Q[:, None] + s[None, :, 1]) % n

    def map(self, verts, space="full"):
        """Vertex ids -> tiled DOFs, shape (n^2, len(verts)); -1 outside the space."""
        if space == "full":
            d, size = self.mesh.dof[verts], self._N
        else:
            d, size = self.mesh.gas_dof[verts], self._Ng
        out = d[None, :] + size * self.tile_index(verts)
        return np.where(d[None, :] >= 0, out, -1)

    def assemble(self, tri: fem.Triplets, row_space="full", col_space=None, scale=1.0):
        col_space = col_space or row_space
        r = self.map(tri.rows, row_space).ravel()
        c = self.map(tri.cols, col_space).ravel()
        v = np.tile(tri.vals, self.n**2) * scale
        keep = (r >= 0) & (c >= 0)
        shape = (self.size(row_space), self.size(col_space))
        return sp.csr_matrix((v[keep], (r[keep], c[keep])), shape=shape)

    def size(self, space):
        return self.n_full if space == "full" else self.n_gas

    def lumped(self, space="full", coeff=1.0):
        return np.tile(fem.lumped_mass(self.mesh, space, coeff), self.n**2) * self.eps**2


@dataclass
class MicroConfig:
    n: int
    dt: float
    T_f: float
    snapshot_every: int = 1

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ConfigError(f"micro n must be an integer >= 2 (eps = 1/n), got {self.n}")
        if not (self.dt > 0 and self.T_f >= 0):
            raise ConfigError("micro dt must be > 0 and T_f >= 0")

    @property
    def epsilon(self):
        return 1.0 / self.n

    @property
    def n_steps(self):
        return int(round(self.T_f / self.dt))


@dataclass
class MicroSnapshot:
    t: float
    T: np.ndarray
    C: np.ndarray


@dataclass
class MicroTrajectory:
    tiled: TiledMesh
    snapshots: list
    energy: list = dc_field(default_factory=list)
    diagnostics: dict = dc_field(default_factory=dict)


class MicroOperators:
    def __init__(self, mesh, n, params, field):
        self.tiled = tm = TiledMesh(mesh, n)
        e2 = tm.eps**2
        self.M_c = tm.assemble(fem.mass_triplets(mesh, params.c), scale=e2)
        self.M_g = tm.assemble(fem.mass_triplets(mesh, 1.0, "gas"), "gas", scale=e2)
        self.K_lam = tm.assemble(fem.stiffness_triplets(mesh, params.lam))
        self.K_lam = ((self.K_lam + self.K_lam.T) * 0.5).tocsr()
        self.K_D = tm.assemble(fem.stiffness_triplets(mesh, params.D, "gas"), "gas")
        self.K_D = ((self.K_D + self.K_D.T) * 0.5).tocsr()
        if field.divergence_residual(mesh) > fem.DIV_TOL:
            raise NumericalError("velocity field must be projected before tiling")
        self.B_T = tm.assemble(fem.convection_triplets(mesh, field, params.c_g))
        self.B_g = tm.assemble(fem.convection_triplets(mesh, field, 1.0), "gas")
        e = mesh.interface_edges
        self.edge_len = np.tile(mesh.interface_lengths, tm.n**2)
        self.e_full = np.stack([tm.map(e[:, 0]).ravel(), tm.map(e[:, 1]).ravel()], 1)
        self.e_gas = np.stack([tm.map(e[:, 0], "gas").ravel(), tm.map(e[:, 1], "gas").ravel()], 1)

    def interface(self, T, A, T_a):
        """R_fg (full x gas) and R_gg with weight A f(T) at the Gauss points."""
        tm = self.tiled
        if len(self.edge_len) == 0:
            return (sp.csr_matrix((tm.n_full, tm.n_gas)), sp.csr_matrix((tm.n_gas, tm.n_gas)))
        g = fem.GAUSS2
        Te = T[self.e_full]
        Tq = Te[:, :1] * (1 - g)[None] + Te[:, 1:] * g[None]
        w = A * arrhenius_f(np.maximum(Tq, 0.0), T_a)
        phi = np.column_stack([1 - g, g])
        local = 0.5 * self.edge_len[:, None, None] * np.einsum("kq,qa,qb->kab", w, phi, phi)
        rows_f = np.repeat(self.e_full, 2, axis=1).ravel()
        rows_g = np.repeat(self.e_gas, 2, axis=1).ravel()
        cols_g = np.tile(self.e_gas, (1, 2)).ravel()
        v = local.ravel()
        R_fg = sp.csr_matrix((v, (rows_f, cols_g)), shape=(tm.n_full, tm.n_gas))
        R_gg = sp.csr_matrix((v, (rows_g, cols_g)), shape=(tm.n_gas, tm.n_gas))
        return R_fg, R_gg


def sample_periodic(u_grid: np.ndarray, L: float, pts: np.ndarray) -> np.ndarray:
    """Periodic bilinear interpolation of node values u[i, j] at (i h, j h)."""
    N = u_grid.shape[0]
    h = L / N
    return map_coordinates(u_grid, [pts[:, 0] / h, pts[:, 1] / h], order=1, mode="grid-wrap")


def _energy(ops, T, C, Q):
    return 0.5 * T @ (ops.M_c @ T) + 0.5 * Q * C @ (ops.M_g @ C)


def run_micro(cfg: MicroConfig, mesh: PeriodicMesh, params, kinetics: KineticsParams, field,
              T_init, C_init, ops: MicroOperators | None = None) -> MicroTrajectory:
    """Backward Euler with the reaction linear in C and f(T) lagged.

    ``T_init``/``C_init`` are callables of (N, 2) points or arrays on the tiled DOFs.
    """
    ops = ops or MicroOperators(mesh, cfg.n, params, field)
    tm = ops.tiled
    T = np.asarray(T_init(tm.full_coords) if callable(T_init) else T_init, float).copy()
    C = np.asarray(C_init(tm.gas_coords) if callable(C_init) else C_init, float).copy()
    if T.shape != (tm.n_full,) or C.shape != (tm.n_gas,):
        raise ConfigError("micro initial data do not match the tiled mesh")
    dt, Q = cfg.dt, kinetics.Q
    t0 = time.perf_counter()
    AT = (ops.M_c / dt + ops.K_lam + ops.B_T).tocsc()
    luT = spla.splu(AT)
    AC0 = (ops.M_g / dt + ops.K_D + ops.B_g).tocsr()
    luC, refactors, iters_total = None, 0, 0
    snaps = [MicroSnapshot(0.0, T.copy(), C.copy())]
    energy = []
    E = _energy(ops, T, C, Q)
    max_res = 0.0
    min_C = float(C.min()) if C.size else 0.0
    for k in range(1, cfg.n_steps + 1):
        R_fg, R_gg = ops.interface(T, kinetics.A, kinetics.T_a)
        AC = (AC0 + R_gg).tocsc()
        rhsC = ops.M_g @ C / dt
        if luC is None:
            luC = spla.splu(AC)
            refactors += 1
        Cn, info = spla.gmres(AC, rhsC, x0=C, rtol=1e-13, atol=0.0, restart=30, maxiter=5,
                              M=spla.LinearOperator(AC.shape, luC.solve))
        resC = np.linalg.norm(AC @ Cn - rhsC) / max(np.linalg.norm(rhsC), 1e-300)
        if info != 0 or resC > 1e-12:
            luC = spla.splu(AC)
            refactors += 1
            Cn = luC.solve(rhsC)
            resC = np.linalg.norm(AC @ Cn - rhsC) / max(np.linalg.norm(rhsC), 1e-300)
        rhsT = ops.M_c @ T / dt + Q * (R_fg @ Cn)
        Tn = luT.solve(rhsT)
        resT = np.linalg.norm(AT @ Tn - rhsT) / max(np.linalg.norm(rhsT), 1e-300)
        max_res = max(max_res, resC, resT)
        if max(resC, resT) > RESIDUAL_TOL or not (np.isfinite(Tn).all() and np.isfinite(Cn).all()):
            raise NumericalError(f"micro step {k} failed (residual {max(resC, resT):.3e}); "
                                 f"try dt <= {dt / 2:.3g}")
        # discrete energy balance obtained by testing with (T+, Q C+)
        En = _energy(ops, Tn, Cn, Q)
        diss = dt * (Tn @ (ops.K_lam @ Tn) + Q * Cn @ (ops.K_D @ Cn))
        inter = dt * Q * (Cn @ (R_gg @ Cn) - Tn @ (R_fg @ Cn))
        conv = dt * (Tn @ (ops.B_T @ Tn) + Q * Cn @ (ops.B_g @ Cn))
        dT, dC = Tn - T, Cn - C
        num = 0.5 * dT @ (ops.M_c @ dT) + 0.5 * Q * dC @ (ops.M_g @ dC)
        balance = En - E + diss + inter
        scale = max(E, 1e-300)
        energy.append({"step": k, "t": k * dt, "E": En, "dissipation": diss, "interface": inter,
                       "convection": conv, "numerical": num,
                       "inequality": (balance - abs(conv)) / scale,
                       "identity": abs(balance + num + conv) / scale,
                       "convection_rel": abs(conv) / scale})
        T, C, E = Tn, Cn, En
        if C.size:
            min_C = min(min_C, float(C.min()))
        if k % cfg.snapshot_every == 0 or k == cfg.n_steps:
            snaps.append(MicroSnapshot(k * dt, T.copy(), C.copy()))
    if min_C < -1e-10:
        log.warning("micro C undershoot %.3e", min_C)
    diag = {"epsilon": tm.eps, "n_full": tm.n_full, "n_gas": tm.n_gas, "steps": cfg.n_steps,
            "max_residual": max_res, "refactorizations": refactors, "min_C": min_C,
            "max_energy_inequality": max((e["inequality"] for e in energy), default=0.0),
            "max_energy_identity": max((e["identity"] for e in energy), default=0.0),
            "max_convection_energy": max((e["convection_rel"] for e in energy), default=0.0),
            "interface_term_negative_steps": sum(e["interface"] < 0 for e in energy),
            "runtime": time.perf_counter() - t0}
    return MicroTrajectory(tm, snaps, energy, diag)


def moving_frame_error(micro: MicroTrajectory, macro, drifts, epsilon: float, L: float = 1.0,
                       frame_shift=(0.0, 0.0)) -> dict:
    """rho_T(t) = |T_eps(t) - T0(t, x - b_T t/eps)|_L2 and rho_C likewise with b_C.

    ``macro`` is a MacroTrajectory on [0, L]^2 (L must be the torus size 1).
    Returns per-snapshot values and the L2-in-time norms sqrt(int rho^2 dt).
    """
    tm = micro.tiled
    mesh = tm.mesh
    Mf = tm.assemble(fem.mass_triplets(mesh), scale=tm.eps**2)
    Mg = tm.assemble(fem.mass_triplets(mesh, 1.0, "gas"), "gas", scale=tm.eps**2)
    bT, bC = np.asarray(drifts.b_T, float), np.asarray(drifts.b_C, float)
    extra = np.asarray(frame_shift, float)
    times, rT, rC = [], [], []
    for snap in micro.snapshots:
        ms = macro.at(snap.t)
        if abs(ms.t - snap.t) > 1e-9 * max(1.0, snap.t) + 1e-12:
            raise ConfigError(f"no macro snapshot at t={snap.t:.6g} (closest {ms.t:.6g})")
        xT = (tm.full_coords - bT * snap.t / epsilon + extra) % L
        xC = (tm.gas_coords - bC * snap.t / epsilon + extra) % L
        eT = snap.T - sample_periodic(ms.T0, L, xT)
        eC = snap.C - sample_periodic(ms.C0, L, xC)
        times.append(snap.t)
        rT.append(float(np.sqrt(max(eT @ (Mf @ eT), 0.0))))
        rC.append(float(np.sqrt(max(eC @ (Mg @ eC), 0.0))))
    t = np.array(times)
    integ = (lambda r: float(np.sqrt(np.trapezoid(np.square(r), t)))) if len(t) > 1 else (lambda r: float(r[0]))
    return {"t": times, "rho_T_t": rT, "rho_C_t": rC,
            "rho_T": integ(rT), "rho_C": integ(rC),
            "rho_T_final": rT[-1], "rho_C_final": rC[-1]}
