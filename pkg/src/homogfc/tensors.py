"""Effective dispersion tensors, their two evaluation routes, bounds and tabulation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cell import AuxiliaryPotentials, CellOperators, CellSolution, solve_auxiliary, solve_cell_problems
from .errors import InvariantViolation, RangeError
from .fem import p1_geometry
from .geometry import GAS
from .kinetics import KineticsParams, arrhenius_df, arrhenius_f

log = logging.getLogger(__name__)

EQUIV_TOL = 1e-8
RANGE_MARGIN = 0.1
PD_RTOL = 1e-12


def _sym(M):
    return 0.5 * (M + M.T)


def _relmax(a, b):
    scale = max(np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


def _integrals(ops):
    _, areas = p1_geometry(ops.mesh)
    gas = ops.mesh.tags == GAS
    p = ops.params
    return {"lam": p.lambda_g * areas[gas].sum() + p.lambda_s * areas[~gas].sum(),
            "lam_g": p.lambda_g * areas[gas].sum(), "lam_s": p.lambda_s * areas[~gas].sum(),
            "D": p.D * areas[gas].sum(), "gas_area": areas[gas].sum()}


def _pieces(sol: CellSolution, ops: CellOperators):
    chi, om = sol.chi, sol.omega
    I = _integrals(ops)
    eye = np.eye(2)
    Ec, Hw = ops.E.T @ chi, ops.H.T @ om            # [i, j] = E_i . chi_j
    return {
        "EL": I["lam"] * eye + Ec + Ec.T + chi.T @ (ops.K_lam @ chi),
        "ED": I["D"] * eye + Hw + Hw.T + om.T @ (ops.K_D @ om),
        "Ec": Ec, "Hw": Hw,
        "Gcc": chi.T @ (ops.G @ chi),
        "Gwc": om.T @ (ops.G_gf @ chi),              # [i, j] = int omega_i chi_j
        "Gww": om.T @ (ops.G_gg @ om),
        "Bc": (chi.T @ (ops.B @ chi)).T,             # [i, j] = chi_j^T B chi_i
        "Bw": (om.T @ (ops.B_g @ om)).T,
        "I": I,
    }


def tensors_symmetric_form(sol: CellSolution, ops: CellOperators, kinetics: KineticsParams | None = None):
    """Energy-form evaluation from corrector gradients and interface traces.

    Returns the exact energy identity of the discrete cell problem (interface
    terms with the signs of the variational form plus the antisymmetric
    convection/gradient parts) and, for reference, the literal textbook
    expressions under ``textbook_*``.
    """
    P = _pieces(sol, ops)
    Q, a1, a2 = ops.Q, sol.a1, sol.a2
    lam = P["EL"] - a1 * P["Gcc"] - a2 * P["Gwc"] + (P["Ec"] - P["Ec"].T) + P["Bc"]
    D = P["ED"] + (a1 / Q) * P["Gwc"].T + (a2 / Q) * P["Gww"] + (P["Hw"] - P["Hw"].T) + P["Bw"]
    out = {"lambda_eff": lam, "D_eff": D}
    out["textbook_lambda"] = P["EL"] + a1 * P["Gcc"] + a2 * P["Gwc"]
    out["textbook_D"] = P["ED"] - (a2 / Q) * P["Gww"] - (a1 / Q) * P["Gwc"]
    return out


def tensors_divergence_form(sol: CellSolution, aux: AuxiliaryPotentials, ops: CellOperators):
    """lambda_ij = int lam delta_ij + int lam grad chi_j . e_i + int grad Pi_i . grad chi_j."""
    if aux.Pi.shape[0] != sol.chi.shape[0] or aux.Sigma.shape[0] != sol.omega.shape[0]:
        raise ValueError("auxiliary potentials and cell solution live on different meshes")
    I = _integrals(ops)
    eye = np.eye(2)
    lam = I["lam"] * eye + ops.E.T @ sol.chi + aux.Pi.T @ (ops.K1 @ sol.chi)
    D = I["D"] * eye + ops.H.T @ sol.omega + aux.Sigma.T @ (ops.K1_g @ sol.omega)
    return {"lambda_eff": lam, "D_eff": D}


@dataclass
class EffectiveTensors:
    lambda_eff: np.ndarray
    D_eff: np.ndarray
    L_sym: np.ndarray
    T0: float
    C0: float
    form_discrepancy: float
    extra: dict = dc_field(default_factory=dict)

    def to_dict(self):
        d = {"T0": self.T0, "C0": self.C0, "lambda_eff": self.lambda_eff.tolist(),
             "D_eff": self.D_eff.tolist(), "L_sym": self.L_sym.tolist(),
             "form_discrepancy": self.form_discrepancy}
        for k, v in self.extra.items():
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return d


def symmetric_part_tensor(lambda_eff, D_eff, Q: float, sol: CellSolution | None = None,
                          ops: CellOperators | None = None, kinetics: KineticsParams | None = None):
    """L = lambda + Q D, L_sym = (L + L^T)/2, plus a direct evaluation from cell fields.

    Returns (L_sym, info) where info holds the direct value, its deviation and
    the literal textbook expression when kinetics is supplied.
    """
    L = np.asarray(lambda_eff) + Q * np.asarray(D_eff)
    L_sym = _sym(L)
    info = {}
    if sol is not None and ops is not None:
        P = _pieces(sol, ops)
        a1, a2 = sol.a1, sol.a2
        direct = (P["EL"] + Q * P["ED"] - a1 * P["Gcc"] + a2 * P["Gww"]
                  + (a1 - a2) * _sym(P["Gwc"]))
        info["L_sym_direct"] = _sym(direct)
        info["L_sym_direct_discrepancy"] = _relmax(_sym(direct), L_sym)
        if kinetics is not None and sol.T0 > 0:
            f = arrhenius_f(sol.T0, kinetics.T_a)
            fpc = arrhenius_df(sol.T0, kinetics.T_a) * sol.C0
            lit = (P["EL"] + Q * P["ED"] + Q * kinetics.A * (f - fpc) * _sym(P["Gwc"])
                   + fpc * P["Gcc"] - f * P["Gww"])
            info["L_sym_textbook"] = _sym(lit)
            info["L_sym_textbook_discrepancy"] = _relmax(_sym(lit), L_sym)
    return L_sym, info


def compute_tensors(sol, aux, ops, kinetics=None) -> EffectiveTensors:
    div = tensors_divergence_form(sol, aux, ops)
    sym = tensors_symmetric_form(sol, ops, kinetics)
    disc = max(_relmax(sym["lambda_eff"], div["lambda_eff"]), _relmax(sym["D_eff"], div["D_eff"]))
    textbook = max(_relmax(sym["textbook_lambda"], div["lambda_eff"]),
                   _relmax(sym["textbook_D"], div["D_eff"]))
    L_sym, info = symmetric_part_tensor(div["lambda_eff"], div["D_eff"], ops.Q, sol, ops, kinetics)
    extra = {"lambda_eff_symmetric_form": sym["lambda_eff"], "D_eff_symmetric_form": sym["D_eff"],
             "textbook_discrepancy": textbook, **info}
    return EffectiveTensors(div["lambda_eff"], div["D_eff"], L_sym, sol.T0, sol.C0, disc, extra)


def coercivity_report(tensors: EffectiveTensors, ops: CellOperators, rtol: float = 1e-10) -> dict:
    """Eigenvalue bounds for sym(lambda_eff), sym(D_eff).

    Positivity and the upper bound sym(D_eff) <= (int_Yg D) Id are the checked
    properties; the two lower bounds are measured only.
    """
    I = _integrals(ops)
    lam_eig = np.linalg.eigvalsh(_sym(tensors.lambda_eff))
    D_eig = np.linalg.eigvalsh(_sym(tensors.D_eff))
    lam0 = max(I["lam_g"], I["lam_s"])
    lam_lb = I["lam"]
    D_lb = (I["lam"] - lam0) / ops.Q
    D_ub = I["D"]

    def status(val, bound, lower=True):
        if abs(val - bound) <= rtol * max(abs(bound), 1.0):
            return "tight"
        return "ok" if (val > bound) == lower else "violated"

    rep = {
        "lambda_min_eig": float(lam_eig[0]), "lambda_max_eig": float(lam_eig[-1]),
        "D_min_eig": float(D_eig[0]), "D_max_eig": float(D_eig[-1]),
        "lambda_positive": bool(lam_eig[0] > PD_RTOL * abs(lam_eig[-1])),
        "D_positive": bool(D_eig[0] > PD_RTOL * abs(D_eig[-1])),
        "lambda_lower_bound": lam_lb, "lambda_lower_status": status(lam_eig[0], lam_lb),
        "D_lower_bound": D_lb, "D_lower_status": status(D_eig[0], D_lb),
        "D_upper_bound": D_ub, "D_upper_status": status(D_eig[-1], D_ub, lower=False),
    }
    rep["D_upper_ok"] = rep["D_upper_status"] != "violated"
    return rep


# ---------------------------------------------------------------------------
# tabulation


@dataclass
class TensorTable:
    T0: np.ndarray                  # sorted, > 0
    C0: np.ndarray                  # sorted
    lam: np.ndarray                 # (nT, nC, 2, 2)
    D: np.ndarray
    reports: list = dc_field(default_factory=list)
    midpoint_error: float | None = None

    def __post_init__(self):
        self.T0 = np.asarray(self.T0, float)
        self.C0 = np.asarray(self.C0, float)
        self.lam = np.asarray(self.lam, float)
        self.D = np.asarray(self.D, float)
        if (np.diff(self.T0) <= 0).any() or (np.diff(self.C0) <= 0).any() or (self.T0 <= 0).any():
            raise ValueError("tensor table grid must be sorted with T0 > 0")

    @classmethod
    def constant(cls, lam, D):
        return cls(np.array([1.0]), np.array([0.0]), np.asarray(lam)[None, None],
                   np.asarray(D)[None, None])

    def _coord(self, nodes, x, name):
        x = np.asarray(x, float)
        if len(nodes) == 1:
            return np.zeros(x.shape, np.int64), np.zeros(x.shape), 0
        lo, hi = nodes[0], nodes[-1]
        span = hi - lo
        out_lo, out_hi = x < lo - RANGE_MARGIN * span, x > hi + RANGE_MARGIN * span
        if out_lo.any() or out_hi.any():
            bad = x[out_lo | out_hi].ravel()[0]
            raise RangeError(f"{name} = {bad:.6g} outside tensor table range "
                             f"[{lo:.6g}, {hi:.6g}] beyond the {RANGE_MARGIN:.0%} margin")
        n_clamped = int(((x < lo) | (x > hi)).sum())
        xc = np.clip(x, lo, hi)
        k = np.clip(np.searchsorted(nodes, xc, side="right") - 1, 0, len(nodes) - 2)
        t = (xc - nodes[k]) / (nodes[k + 1] - nodes[k])
        return k, t, n_clamped

    def interpolate(self, T0, C0):
        """Bilinear in (log T0, C0); returns (lambda, D) with shape (..., 2, 2)."""
        T0 = np.asarray(T0, float)
        if (T0 <= 0).any():
            raise RangeError("T0 must stay positive for tensor lookup")
        i, s, n1 = self._coord(np.log(self.T0), np.log(T0), "log T0")
        j, t, n2 = self._coord(self.C0, C0, "C0")
        if n1 + n2:
            log.warning("tensor lookup clamped at %d points", n1 + n2)
        shape = np.broadcast(T0, np.asarray(C0)).shape
        if self.lam.shape[:2] == (1, 1):
            return (np.broadcast_to(self.lam[0, 0], shape + (2, 2)),
                    np.broadcast_to(self.D[0, 0], shape + (2, 2)))
        nT, nC = len(self.T0), len(self.C0)
        i, j, s, t = (np.broadcast_to(a, shape).ravel() for a in (i, j, s, t))
        i1, j1 = np.minimum(i + 1, nT - 1), np.minimum(j + 1, nC - 1)
        w = np.stack([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t], axis=1)
        idx = np.stack([i * nC + j, i1 * nC + j, i * nC + j1, i1 * nC + j1], axis=1)

        def bil(A):
            flat = A.reshape(nT * nC, 4)
            return np.einsum("pk,pkc->pc", w, flat[idx]).reshape(shape + (2, 2))
        return bil(self.lam), bil(self.D)

    def to_dict(self):
        return {"T0": self.T0.tolist(), "C0": self.C0.tolist(), "lambda_eff": self.lam.tolist(),
                "D_eff": self.D.tolist(), "reports": self.reports,
                "midpoint_error": self.midpoint_error}

    @classmethod
    def from_dict(cls, d):
        return cls(d["T0"], d["C0"], d["lambda_eff"], d["D_eff"], d.get("reports", []),
                   d.get("midpoint_error"))


def tensor_grid(T_range, n_T, C_range, n_C):
    T = np.geomspace(T_range[0], T_range[1], n_T) if n_T > 1 else np.array([float(T_range[0])])
    C = np.linspace(C_range[0], C_range[1], n_C) if n_C > 1 else np.array([float(C_range[0])])
    return T, C


def build_tensor_table(ops: CellOperators, kinetics: KineticsParams, T_nodes, C_nodes,
                       threads: int = 1, midpoint_check: bool = False,
                       assert_upper_bound: bool = True) -> TensorTable:
    """Solve the cell problems on every (T0, C0) node and tabulate the tensors."""
    aux = solve_auxiliary(ops.params, ops.mesh, ops.field, ops.drifts, ops)
    T_nodes, C_nodes = np.asarray(T_nodes, float), np.asarray(C_nodes, float)
    if (T_nodes <= 0).any():
        raise ValueError("T0 nodes must be > 0")
    nodes = [(T, C) for T in T_nodes for C in C_nodes]

    def node(tc):
        sol = solve_cell_problems(ops.params, kinetics, ops.mesh, ops.field, ops.drifts,
                                  tc[0], tc[1], ops=ops)
        return compute_tensors(sol, aux, ops, kinetics), sol.diagnostics

    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        results = list(ex.map(node, nodes))
    nT, nC = len(T_nodes), len(C_nodes)
    lam = np.empty((nT, nC, 2, 2))
    D = np.empty((nT, nC, 2, 2))
    reports = []
    for k, ((T, C), (ten, diag)) in enumerate(zip(nodes, results)):
        i, j = divmod(k, nC)
        lam[i, j], D[i, j] = ten.lambda_eff, ten.D_eff
        rep = coercivity_report(ten, ops)
        rep.update(T0=float(T), C0=float(C), form_discrepancy=ten.form_discrepancy,
                   energy_quotient=diag.get("energy_quotient"))
        reports.append(rep)
        if not (rep["lambda_positive"] and rep["D_positive"]):
            raise InvariantViolation(
                f"effective tensor not positive definite at node (T0={T:.6g}, C0={C:.6g}): "
                f"min eig lambda {rep['lambda_min_eig']:.4g}, D {rep['D_min_eig']:.4g}")
        if assert_upper_bound and not rep["D_upper_ok"]:
            raise InvariantViolation(
                f"sym(D_eff) exceeds (int_Yg D) Id at node (T0={T:.6g}, C0={C:.6g}): "
                f"max eig {rep['D_max_eig']:.6g} > {rep['D_upper_bound']:.6g}")
    table = TensorTable(T_nodes, C_nodes, lam, D, reports)
    if midpoint_check and (nT > 1 or nC > 1):
        table.midpoint_error = midpoint_error(table, ops, kinetics, aux, threads)
    return table


def midpoint_error(table: TensorTable, ops, kinetics, aux=None, threads=1) -> float:
    """Max relative error of bilinear interpolation against direct solves at cell midpoints."""
    aux = aux or solve_auxiliary(ops.params, ops.mesh, ops.field, ops.drifts, ops)
    lt = np.log(table.T0)
    Tm = np.exp(0.5 * (lt[1:] + lt[:-1])) if len(lt) > 1 else table.T0
    Cm = 0.5 * (table.C0[1:] + table.C0[:-1]) if len(table.C0) > 1 else table.C0
    pts = [(T, C) for T in Tm for C in Cm]

    def err(tc):
        sol = solve_cell_problems(ops.params, kinetics, ops.mesh, ops.field, ops.drifts,
                                  tc[0], tc[1], ops=ops)
        ten = compute_tensors(sol, aux, ops, kinetics)
        li, Di = table.interpolate(tc[0], tc[1])
        return max(_relmax(li, ten.lambda_eff), _relmax(Di, ten.D_eff))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        return float(max(ex.map(err, pts)))
