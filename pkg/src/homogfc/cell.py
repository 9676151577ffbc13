"""Auxiliary potentials and coupled corrector cell problems.

Unknowns are ordered ``[chi (full DOFs), omega (gas DOFs)]``.  The heat rows
test with phi, the mass rows test with psi and are multiplied by Q so that the
interface coupling appears with the same scalar weights in both blocks:

    heat:  K_lam chi + c_g B chi - a1 G chi - a2 G_fg omega = F_j
    mass:  a1 G_gf chi + Q (K_D + B_g) omega + a2 G_gg omega = Q H_j

with a1 = Q A f'(T0) C0, a2 = Q A f(T0).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .drifts import DriftPair, MaterialParams, compatibility_residuals
from .errors import CompatibilityError, NumericalError
from .geometry import GAS, PeriodicMesh
from .kinetics import KineticsParams, interface_coefficients

log = logging.getLogger(__name__)

COMPAT_TOL = 1e-10
RESIDUAL_TOL = 1e-10


class CellOperators:
    """Every (T0, C0)-independent piece of the cell problems for one mesh."""

    def __init__(self, params: MaterialParams, mesh: PeriodicMesh, field, drifts: DriftPair,
                 Q: float = 1.0):
        self.params, self.mesh, self.field, self.drifts, self.Q = params, mesh, field, drifts, Q
        self.n, self.m = mesh.n_dof, mesh.n_gas_dof
        self.K_lam = fem.assemble_stiffness(mesh, params.lam)
        self.K_D = fem.assemble_stiffness(mesh, params.D, "gas")
        self.K1 = fem.assemble_stiffness(mesh, 1.0)
        self.K1_g = fem.assemble_stiffness(mesh, 1.0, "gas")
        # convection checks the divergence residual once here
        conv = fem.assemble_convection(mesh, field, 1.0, "gas")
        self.B_g = conv
        self.B = fem.convection_triplets(mesh, field, params.c_g).to_space(mesh, "full")
        tri = fem.interface_triplets(mesh)
        self.G = tri.to_space(mesh, "full")
        self.G_fg = tri.to_space(mesh, "full", "gas")
        self.G_gf = tri.to_space(mesh, "gas", "full")
        self.G_gg = tri.to_space(mesh, "gas")
        self.w_full = fem.lumped_mass(mesh, "full")
        self.w_gas = fem.lumped_mass(mesh, "gas")

        b = field.values
        c_tri = fem.per_triangle(mesh, params.c)
        gas = mesh.tags == GAS
        bT, bC = np.asarray(drifts.b_T, float), np.asarray(drifts.b_C, float)
        # sources c (b_T - b)_j on Y and (b_C - b)_j on Y_g
        self.src_T = np.column_stack([fem.load_vector(mesh, c_tri * (bT[j] - b[:, j]))
                                      for j in range(2)])
        self.src_C = np.column_stack([fem.load_vector(mesh, np.where(gas, bC[j] - b[:, j], 0.0),
                                                      "gas") for j in range(2)])
        self.E = np.column_stack([fem.gradient_load(mesh, params.lam, j) for j in range(2)])
        self.H = np.column_stack([fem.gradient_load(mesh, params.D, j, "gas") for j in range(2)])
        self.compat = compatibility_residuals(params, mesh, field, drifts)

    def rhs(self):
        """(n+m, 2) right-hand sides for j = 1, 2."""
        return np.vstack([self.src_T - self.E, self.Q * (self.src_C - self.H)])

    def system(self, a1: float, a2: float) -> sp.csr_matrix:
        Q = self.Q
        heat = [self.K_lam + self.B - a1 * self.G, -a2 * self.G_fg]
        mass = [a1 * self.G_gf, Q * (self.K_D + self.B_g) + a2 * self.G_gg]
        return sp.bmat([heat, mass], format="csr")


@dataclass
class AuxiliaryPotentials:
    Pi: np.ndarray          # (n_dof, 2)
    Sigma: np.ndarray       # (n_gas_dof, 2)
    residual: float = 0.0


@dataclass
class CellSolution:
    chi: np.ndarray         # (n_dof, 2)
    omega: np.ndarray       # (n_gas_dof, 2)
    T0: float
    C0: float
    a1: float
    a2: float
    diagnostics: dict = dc_field(default_factory=dict)

    def to_dict(self):
        return {"T0": self.T0, "C0": self.C0, "a1": self.a1, "a2": self.a2,
                "chi": self.chi.T.tolist(), "omega": self.omega.T.tolist(),
                "diagnostics": self.diagnostics}


def _check_compat(ops: CellOperators):
    if ops.compat["max"] > COMPAT_TOL:
        raise CompatibilityError(
            f"drifts do not satisfy the compatibility conditions (residual {ops.compat['max']:.3e})",
            residual=ops.compat["max"])


def solve_auxiliary(params, mesh, field, drifts, ops: CellOperators | None = None):
    """Pi_i on Y and Sigma_i on Y_g, both zero-mean."""
    ops = ops or CellOperators(params, mesh, field, drifts)
    _check_compat(ops)
    Pi = fem.ZeroMeanSolver(ops.K1, ops.w_full).solve(ops.src_T)
    if ops.m:
        Sigma = fem.ZeroMeanSolver(ops.K1_g, ops.w_gas).solve(ops.src_C)
    else:
        Sigma = np.zeros((0, 2))
    res = np.linalg.norm(ops.K1 @ Pi - ops.src_T) / max(np.linalg.norm(ops.src_T), 1e-300)
    return AuxiliaryPotentials(Pi, Sigma, float(res))


def _bordered_solve(S, rhs, cons):
    """Solve S x = rhs subject to cons^T x = 0 (cons columns are linear constraints)."""
    k = cons.shape[1]
    C = sp.csr_matrix(cons)
    big = sp.bmat([[S, C], [C.T, None]], format="csc")
    try:
        lu = spla.splu(big)
    except RuntimeError as exc:
        raise NumericalError(f"coupled cell system is singular: {exc}") from exc
    sol = lu.solve(np.vstack([rhs, np.zeros((k, rhs.shape[1]))]))
    return sol[: S.shape[0]], sol[S.shape[0]:]


def solve_cell_problems(params: MaterialParams, kinetics: KineticsParams, mesh: PeriodicMesh,
                        field, drifts: DriftPair, T0: float, C0: float,
                        ops: CellOperators | None = None, coefficients=None) -> CellSolution:
    """Solve the coupled (chi_j, omega_j), j = 1, 2, at the macroscopic state (T0, C0).

    ``coefficients`` may override (a1, a2) directly.
    """
    ops = ops or CellOperators(params, mesh, field, drifts, kinetics.Q)
    _check_compat(ops)
    a1, a2 = coefficients if coefficients is not None else interface_coefficients(kinetics, T0, C0)
    n, m = ops.n, ops.m
    S = ops.system(a1, a2)
    F = ops.rhs()
    # kernel: constants (alpha, beta) with a1 alpha + a2 beta = 0 on the interface
    coupled = (a1 != 0 or a2 != 0) and len(mesh.interface_edges) > 0
    wf = np.concatenate([ops.w_full, np.zeros(m)])
    if coupled:
        cons = wf[:, None]
    else:
        cons = np.column_stack([wf, np.concatenate([np.zeros(n), ops.w_gas])])
    # left kernel is (1, 1) when coupled, (1, 0), (0, 1) otherwise
    left = [np.ones(n + m)] if coupled else [np.r_[np.ones(n), np.zeros(m)],
                                             np.r_[np.zeros(n), np.ones(m)]]
    a_norm = abs(S).sum(axis=1).max()
    for l in left:
        s = np.abs(l @ F).max()
        if s > COMPAT_TOL * np.abs(F).sum(axis=0).max() and s > 1e-14 * a_norm:
            raise CompatibilityError(f"cell problem right-hand side incompatible: {s:.3e}", residual=s)
    # remove the sub-tolerance incompatible part along each constraint weight
    for l, c in zip(left, cons.T):
        F = F - np.outer(c, (l @ F) / (l @ c))
    X, mult = _bordered_solve(S, F, cons)
    rel = fem.backward_error(S, X, F, a_norm)
    if rel > RESIDUAL_TOL:
        raise NumericalError(
            f"coupled cell solve residual {rel:.3e} exceeds {RESIDUAL_TOL:g}; the system is "
            f"close to singular at (a1, a2) = ({a1:.4g}, {a2:.4g})")
    chi, omega = X[:n], X[n:]
    diag = {"residual": rel, "constraints": cons.shape[1], "compatibility": ops.compat["max"],
            "energy_quotient": energy_quotient(ops, S, chi, omega)}
    if diag["energy_quotient"] is not None and diag["energy_quotient"] <= 0:
        diag["definiteness_lost"] = True
        log.warning("coupled cell form not positive on the computed correctors at T0=%g, C0=%g",
                    T0, C0)
    return CellSolution(chi, omega, float(T0), float(C0), float(a1), float(a2), diag)


def energy_quotient(ops, S, chi, omega):
    """min_j a(u_j, u_j) / (|grad chi_j|^2_lam + Q |grad omega_j|^2_D); None for zero fields."""
    out = []
    for j in range(chi.shape[1]):
        u = np.concatenate([chi[:, j], omega[:, j]])
        den = chi[:, j] @ (ops.K_lam @ chi[:, j]) + ops.Q * omega[:, j] @ (ops.K_D @ omega[:, j])
        if den > 1e-300:
            out.append(float(u @ (S @ u)) / den)
    return min(out) if out else None


def reconstruct_correctors(sol: CellSolution, gradT0, gradC0):
    """T1 = sum_j chi_j dT0/dx_j on Y and C1 = sum_j omega_j dC0/dx_j on Y_g."""
    return sol.chi @ np.asarray(gradT0, float), sol.omega @ np.asarray(gradC0, float)
