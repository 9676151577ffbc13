"""P1 finite elements on a PeriodicMesh.

Operators are assembled at vertex level first (COO triplets indexed by mesh
vertices) and then mapped onto periodic degrees of freedom.  The vertex-level
triplets are exposed because the micro solver tiles them over many cells.

Two function spaces are used throughout: ``"full"`` (continuous P1 over the
whole cell, periodic DOFs ``mesh.dof``) and ``"gas"`` (P1 over the gas part,
``mesh.gas_dof``).
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, CompatibilityError, NumericalError
from .geometry import GAS, SOLID, PeriodicMesh

DIV_TOL = 1e-10
GAUSS2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])

_cache: "weakref.WeakKeyDictionary[PeriodicMesh, tuple]" = weakref.WeakKeyDictionary()


def p1_geometry(mesh: PeriodicMesh):
    """Per-triangle basis gradients (M, 3, 2) and areas (M,)."""
    try:
        return _cache[mesh]
    except KeyError:
        pass
    p = mesh.vertices[mesh.triangles]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    inv = np.empty((len(p), 2, 2))
    inv[:, 0, 0], inv[:, 0, 1] = e2[:, 1] / det, -e2[:, 0] / det
    inv[:, 1, 0], inv[:, 1, 1] = -e1[:, 1] / det, e1[:, 0] / det
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = np.einsum("ak,mkj->maj", ref, inv)
    out = (grads, 0.5 * det)
    _cache[mesh] = out
    return out


def space_map(mesh: PeriodicMesh, space: str):
    if space == "full":
        return mesh.dof, mesh.n_dof
    if space == "gas":
        return mesh.gas_dof, mesh.n_gas_dof
    raise ValueError(f"unknown space {space!r}")


def per_triangle(mesh: PeriodicMesh, coeff) -> np.ndarray:
    """Expand a scalar, (gas, solid) pair, {"gas":, "solid":} dict or array per triangle."""
    if isinstance(coeff, dict):
        coeff = (coeff.get("gas", 0.0), coeff.get("solid", 0.0))
    if np.ndim(coeff) == 0:
        return np.full(len(mesh.triangles), float(coeff))
    coeff = np.asarray(coeff, dtype=float)
    if coeff.shape == (2,):
        return np.where(mesh.tags == GAS, coeff[0], coeff[1])
    if coeff.shape == (len(mesh.triangles),):
        return coeff
    raise ValueError(f"cannot interpret coefficient of shape {coeff.shape}")


@dataclass
class Triplets:
    """Vertex-level COO data."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def to_space(self, mesh, row_space="full", col_space=None, scale=1.0):
        col_space = col_space or row_space
        rmap, nr = space_map(mesh, row_space)
        cmap, nc = space_map(mesh, col_space)
        r, c = rmap[self.rows], cmap[self.cols]
        keep = (r >= 0) & (c >= 0)
        return sp.csr_matrix((scale * self.vals[keep], (r[keep], c[keep])), shape=(nr, nc))


def _element_triplets(mesh, local, tri_idx):
    t = mesh.triangles[tri_idx]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return Triplets(rows, cols, local.reshape(-1))


def _mask(mesh, space):
    return mesh.tags == GAS if space == "gas" else np.ones(len(mesh.triangles), dtype=bool)


def stiffness_triplets(mesh, coeff, space="full") -> Triplets:
    grads, areas = p1_geometry(mesh)
    c = per_triangle(mesh, coeff)
    idx = np.nonzero(_mask(mesh, space))[0]
    local = np.einsum("mai,mbi->mab", grads[idx], grads[idx]) * (c[idx] * areas[idx])[:, None, None]
    return _element_triplets(mesh, local, idx)


def mass_triplets(mesh, coeff=1.0, space="full") -> Triplets:
    _, areas = p1_geometry(mesh)
    c = per_triangle(mesh, coeff)
    idx = np.nonzero(_mask(mesh, space))[0]
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = ref[None] * (c[idx] * areas[idx])[:, None, None]
    return _element_triplets(mesh, local, idx)


def convection_triplets(mesh, field, coeff=1.0) -> Triplets:
    """Entries int c (b . grad phi_col) phi_row over gas triangles."""
    grads, areas = p1_geometry(mesh)
    c = per_triangle(mesh, coeff)
    idx = np.nonzero(mesh.tags == GAS)[0]
    bg = np.einsum("mi,mbi->mb", field.values[idx], grads[idx])  # b . grad phi_b
    local = np.repeat(bg[:, None, :], 3, axis=1) * (c[idx] * areas[idx] / 3.0)[:, None, None]
    return _element_triplets(mesh, local, idx)


def interface_triplets(mesh, gauss_values=None) -> Triplets:
    """Entries int_Gamma w phi_a phi_b with w given at the two Gauss points per edge."""
    e = mesh.interface_edges
    if len(e) == 0:
        return Triplets(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    L = mesh.interface_lengths
    w = np.ones((len(e), 2)) if gauss_values is None else np.asarray(gauss_values)
    phi = np.column_stack([1 - GAUSS2, GAUSS2])        # phi[q, a]
    local = 0.5 * L[:, None, None] * np.einsum("kq,qa,qb->kab", w, phi, phi)
    rows = np.repeat(e, 2, axis=1).ravel()
    cols = np.tile(e, (1, 2)).ravel()
    return Triplets(rows, cols, local.reshape(-1))


def interface_gauss_values(mesh, nodal_full) -> np.ndarray:
    """Interpolate a full-space nodal field to the interface Gauss points, shape (K, 2)."""
    e = mesh.interface_edges
    u = np.asarray(nodal_full)[mesh.dof[e]]          # (K, 2) endpoint values
    return u[:, :1] * (1 - GAUSS2)[None] + u[:, 1:] * GAUSS2[None]


# ---------------------------------------------------------------------------
# public assembly


def assemble_stiffness(mesh, coeff, space="full") -> sp.csr_matrix:
    c = per_triangle(mesh, coeff)
    if (c[_mask(mesh, space)] <= 0).any():
        raise AssemblyError("stiffness coefficient must be positive on every assembled subdomain")
    K = stiffness_triplets(mesh, c, space).to_space(mesh, space)
    return ((K + K.T) * 0.5).tocsr()


def assemble_mass(mesh, coeff=1.0, space="full") -> sp.csr_matrix:
    return mass_triplets(mesh, coeff, space).to_space(mesh, space)


def lumped_mass(mesh, space="full", coeff=1.0) -> np.ndarray:
    """Vector of integrals of the basis functions (times coeff)."""
    _, areas = p1_geometry(mesh)
    c = per_triangle(mesh, coeff)
    m = _mask(mesh, space)
    vmap, n = space_map(mesh, space)
    out = np.zeros(n)
    np.add.at(out, vmap[mesh.triangles[m]].ravel(), np.repeat(c[m] * areas[m] / 3.0, 3))
    return out


def assemble_convection(mesh, field, coeff=1.0, space="gas") -> sp.csr_matrix:
    """Convection operator c b.grad u v in non-divergence form."""
    res = field.divergence_residual(mesh)
    if res > DIV_TOL:
        raise AssemblyError(
            f"velocity field is not discretely divergence-free (relative residual {res:.3e}); "
            "run project_divergence_free first")
    return convection_triplets(mesh, field, coeff).to_space(mesh, space)


def assemble_interface_mass(mesh, gauss_values=None, row_space="full", col_space=None):
    """Interface mass matrix; zero operator when the cell has no interface."""
    return interface_triplets(mesh, gauss_values).to_space(mesh, row_space, col_space)


def load_vector(mesh, values_per_triangle, space="full") -> np.ndarray:
    """Vector int f phi_a for f constant on each triangle (zero where NaN-free mask excludes)."""
    _, areas = p1_geometry(mesh)
    f = np.asarray(values_per_triangle, dtype=float)
    m = _mask(mesh, space)
    vmap, n = space_map(mesh, space)
    out = np.zeros(n)
    np.add.at(out, vmap[mesh.triangles[m]].ravel(), np.repeat(f[m] * areas[m] / 3.0, 3))
    return out


def gradient_load(mesh, coeff, direction, space="full") -> np.ndarray:
    """Vector int coeff e_j . grad phi_a."""
    grads, areas = p1_geometry(mesh)
    c = per_triangle(mesh, coeff)
    m = _mask(mesh, space)
    vmap, n = space_map(mesh, space)
    out = np.zeros(n)
    vals = grads[m][:, :, direction] * (c[m] * areas[m])[:, None]
    np.add.at(out, vmap[mesh.triangles[m]].ravel(), vals.ravel())
    return out


def nodal_gradients(mesh, u, space="full") -> np.ndarray:
    """Per-triangle gradient (M, 2) of a nodal field; NaN outside the space."""
    grads, _ = p1_geometry(mesh)
    vmap, _ = space_map(mesh, space)
    idx = vmap[mesh.triangles]
    ok = (idx >= 0).all(axis=1)
    out = np.full((len(mesh.triangles), 2), np.nan)
    out[ok] = np.einsum("ma,mai->mi", np.asarray(u)[idx[ok]], grads[ok])
    return out


# ---------------------------------------------------------------------------
# solves


class ZeroMeanSolver:
    """Factorized bordered system [[A, w], [w^T, 0]] enforcing w.x = 0."""

    def __init__(self, A, weights=None):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        self.A = A
        self.w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        col = sp.csr_matrix(self.w.reshape(-1, 1))
        big = sp.bmat([[A, col], [col.T, None]], format="csc")
        try:
            self.lu = spla.splu(big)
        except RuntimeError as exc:
            raise NumericalError(f"bordered zero-mean system is singular: {exc}") from exc

    def solve(self, rhs, tol=1e-10):
        rhs = np.asarray(rhs, dtype=float)
        two_d = rhs.ndim == 2
        R = rhs if two_d else rhs[:, None]
        a_norm = abs(self.A).sum(axis=1).max() if self.A.nnz else 0.0
        for k in range(R.shape[1]):
            r = R[:, k]
            scale = np.abs(r).sum()
            s = abs(r.sum())
            if s > tol * scale and s > 1e-14 * max(a_norm, 1.0):
                raise CompatibilityError(
                    f"incompatible right-hand side: 1^T rhs = {r.sum():.6e} "
                    f"(relative {s / scale:.3e}); check the effective drift",
                    residual=float(r.sum()))
        # drop the sub-tolerance incompatible part so the residual measures the solve only
        R = R - np.outer(self.w, R.sum(axis=0) / self.w.sum())
        big = np.vstack([R, np.zeros((1, R.shape[1]))])
        X = self.lu.solve(big)[:-1]
        rel = backward_error(self.A, X, R, a_norm)
        if rel > 1e-10:
            raise NumericalError(f"zero-mean solve residual too large: {rel:.3e}")
        return X if two_d else X[:, 0]


def backward_error(A, X, R, a_norm=None) -> float:
    """|A X - R|_max / (|A|_inf |X|_max + |R|_max), columns sharing one scale."""
    if a_norm is None:
        a_norm = abs(A).sum(axis=1).max() if A.nnz else 0.0
    X = X.reshape(len(X), -1)
    R = R.reshape(len(R), -1)
    res = np.abs(A @ X - R).max()
    den = a_norm * np.abs(X).max() + np.abs(R).max()
    return float(res / den) if den > 0 else 0.0


def solve_zero_mean(system, rhs, weights=None):
    """Solve system x = rhs with w.x = 0 (w defaults to ones)."""
    return ZeroMeanSolver(system, weights).solve(rhs)


def dump_operator(path, A, comment=""):
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment)


# ---------------------------------------------------------------------------
# velocity fields


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Velocity constant on each triangle (zero on solid triangles).

    Produced as the curl of a P1 stream function that is constant along each
    interface component, so normal fluxes are continuous across every edge,
    b.n = 0 on the interface and the convection operator is skew.
    """

    values: np.ndarray
    stream: np.ndarray | None = None

    @property
    def sup_norm(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def scaled(self, s: float) -> "VelocityField":
        return VelocityField(self.values * s, None if self.stream is None else self.stream * s)

    def nodal_values(self, mesh, space="full") -> np.ndarray:
        """Area-weighted nodal average (export only)."""
        _, areas = p1_geometry(mesh)
        vmap, n = space_map(mesh, space)
        acc = np.zeros((n, 2))
        wsum = np.zeros(n)
        gas = mesh.tags == GAS
        idx = vmap[mesh.triangles[gas]].ravel()
        np.add.at(acc, idx, np.repeat(self.values[gas] * areas[gas, None], 3, axis=0))
        np.add.at(wsum, idx, np.repeat(areas[gas], 3))
        ok = wsum > 0
        acc[ok] /= wsum[ok, None]
        return acc

    def weak_divergence(self, mesh) -> np.ndarray:
        """Vector int_Yg b . grad phi_a over gas DOFs."""
        grads, areas = p1_geometry(mesh)
        gas = np.nonzero(mesh.tags == GAS)[0]
        vals = np.einsum("mi,mai->ma", self.values[gas], grads[gas]) * areas[gas, None]
        out = np.zeros(mesh.n_gas_dof)
        np.add.at(out, mesh.gas_dof[mesh.triangles[gas]].ravel(), vals.ravel())
        return out

    def flux_jumps(self, mesh):
        """(max |normal-flux jump| over gas edges, max |b.n| over interface edges)."""
        tris = mesh.triangles
        v = mesh.vertices
        loc = np.array([[0, 1], [1, 2], [2, 0]])
        e = tris[:, loc]                                 # (M, 3, 2) vertex ids, CCW
        d = v[e[..., 1]] - v[e[..., 0]]
        n_out = np.stack([d[..., 1], -d[..., 0]], axis=-1)   # length-scaled outward normal
        flux = np.einsum("mi,mki->mk", self.values, n_out)
        key = np.sort(mesh.dof[e], axis=-1).reshape(-1, 2)
        gas = np.repeat(mesh.tags == GAS, 3)
        key, flux = key[gas], flux.ravel()[gas]
        order = np.lexsort((key[:, 1], key[:, 0]))
        key, flux = key[order], flux[order]
        same = (key[1:] == key[:-1]).all(axis=1)
        jump = np.abs(flux[1:][same] + flux[:-1][same]).max() if same.any() else 0.0
        if len(mesh.interface_edges):
            L = mesh.interface_lengths
            # gas-side triangle of each interface edge
            gas_side = self.values[_interface_gas_triangles(mesh)]
            bn = np.abs((gas_side * mesh.interface_normals).sum(axis=1))
            trace = float(bn.max())
        else:
            trace = 0.0
        return float(jump), trace

    def divergence_residual(self, mesh) -> float:
        """Relative discrete divergence residual (0 for admissible fields)."""
        bmax = self.sup_norm
        if bmax == 0:
            return 0.0
        scale = bmax * mesh.h
        r = np.abs(self.weak_divergence(mesh)).max() / scale
        jump, trace = self.flux_jumps(mesh)
        return float(max(r, jump / scale, trace / bmax))


def _interface_gas_triangles(mesh):
    tris = mesh.triangles
    edges = np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    owner = np.tile(np.arange(len(tris)), 3)
    lookup = {}
    for (a, b), t in zip(map(tuple, edges), owner):
        if mesh.tags[t] == GAS:
            lookup[(a, b)] = t
    return np.array([lookup[tuple(sorted(e))] for e in mesh.interface_edges], dtype=np.int64)


def zero_field(mesh) -> VelocityField:
    return VelocityField(np.zeros((len(mesh.triangles), 2)),
                         np.zeros(len(mesh.vertices)))


def _triangle_average(mesh, raw):
    raw = np.asarray(raw, dtype=float)
    M = len(mesh.triangles)
    if raw.shape == (M, 2):
        return raw
    if raw.shape == (mesh.n_dof, 2):
        return raw[mesh.dof[mesh.triangles]].mean(axis=1)
    if raw.shape == (mesh.n_gas_dof, 2):
        idx = mesh.gas_dof[mesh.triangles]
        out = np.zeros((M, 2))
        ok = (idx >= 0).all(axis=1)
        out[ok] = raw[idx[ok]].mean(axis=1)
        return out
    if raw.shape == (len(mesh.vertices), 2):
        return raw[mesh.triangles].mean(axis=1)
    raise ValueError(f"raw velocity of shape {raw.shape} matches no mesh entity")


def _interface_components(mesh):
    """Union-find over gas DOFs along interface edges, with stream offsets.

    Returns (root_of_gas_dof, offset (n_gas, 2), g-constraints list).
    """
    n = mesh.n_gas_dof
    parent = np.arange(n)
    off = np.zeros((n, 2))

    def find(d):
        acc = np.zeros(2)
        while parent[d] != d:
            acc += off[d]
            d = parent[d]
        return d, acc

    constraints = []
    for u, v in mesh.interface_edges:
        du, dv = mesh.gas_dof[u], mesh.gas_dof[v]
        ru, ou = find(du)
        rv, ov = find(dv)
        rel = ou + mesh.shift[u] - ov - mesh.shift[v]
        if ru != rv:
            parent[rv] = ru
            off[rv] = rel
        elif np.any(rel != 0):
            constraints.append(rel)
    roots = np.empty(n, dtype=np.int64)
    offs = np.empty((n, 2))
    for d in range(n):
        roots[d], offs[d] = find(d)
    return roots, offs, constraints


def project_divergence_free(mesh: PeriodicMesh, raw) -> VelocityField:
    """L2(Y_g)-projection of ``raw`` onto discretely divergence-free fields.

    The target space is {curl psi : psi P1 on Y_g, psi constant on every
    interface component, psi periodic up to a linear part}.  The linear part
    carries the mean flow.  ``raw`` may be nodal (full or gas DOFs, or mesh
    vertices) or per-triangle, or a VelocityField.
    """
    if isinstance(raw, VelocityField):
        raw = raw.values
    target = _triangle_average(mesh, raw)
    if not np.isfinite(target).all():
        raise NumericalError("raw velocity contains non-finite values")
    gas = np.nonzero(mesh.tags == GAS)[0]
    grads, areas = p1_geometry(mesh)

    roots, offs, cons = _interface_components(mesh)
    if cons:
        null = scipy.linalg.null_space(np.array(cons))
    else:
        null = np.eye(2)
    uniq, col_of_root = np.unique(roots, return_inverse=True)
    n_z = len(uniq)
    n_g = null.shape[1]

    # vertex-level stream: psi_v = z[root] + (off + shift_v) . (null gamma)
    gv = np.nonzero(mesh.gas_dof >= 0)[0]
    gd = mesh.gas_dof[gv]
    coef = (offs[gd] + mesh.shift[gv]) @ null             # (n_gv, n_g)
    rows = np.concatenate([gv, np.repeat(gv, n_g)])
    cols = np.concatenate([col_of_root[gd], n_z + np.tile(np.arange(n_g), len(gv))])
    vals = np.concatenate([np.ones(len(gv)), coef.ravel()])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(len(mesh.vertices), n_z + n_g))

    t = mesh.triangles[gas]
    G_rows = np.concatenate([np.repeat(2 * np.arange(len(gas)), 3),
                             np.repeat(2 * np.arange(len(gas)) + 1, 3)])
    G_cols = np.concatenate([t.ravel(), t.ravel()])
    G_vals = np.concatenate([grads[gas, :, 0].ravel(), grads[gas, :, 1].ravel()])
    G = sp.csr_matrix((G_vals, (G_rows, G_cols)), shape=(2 * len(gas), len(mesh.vertices)))
    GP = (G @ P).tocsc()[:, 1:]                             # pin the first root
    W = sp.diags(np.repeat(areas[gas], 2))
    # grad psi = (-b_y, b_x)
    tgt = np.column_stack([-target[gas, 1], target[gas, 0]]).ravel()
    A = (GP.T @ W @ GP).tocsc()
    rhs = GP.T @ (W @ tgt)
    try:
        sol = spla.splu(A).solve(rhs)
    except RuntimeError as exc:
        raise NumericalError(f"projection system is singular: {exc}") from exc
    w = np.concatenate([[0.0], sol])
    psi = P @ w
    gpsi = (G @ psi).reshape(-1, 2)
    values = np.zeros((len(mesh.triangles), 2))
    values[gas, 0] = gpsi[:, 1]
    values[gas, 1] = -gpsi[:, 0]
    return VelocityField(values, psi)


def field_from_stream(mesh, psi_vertex) -> VelocityField:
    """Curl of a vertex-level P1 stream function (gas triangles only)."""
    grads, _ = p1_geometry(mesh)
    gp = np.einsum("ma,mai->mi", np.asarray(psi_vertex)[mesh.triangles], grads)
    vals = np.column_stack([gp[:, 1], -gp[:, 0]])
    vals[mesh.tags == SOLID] = 0.0
    return VelocityField(vals, np.asarray(psi_vertex, dtype=float))


def cellular_raw(mesh, amplitude, mean=(0.0, 0.0)) -> np.ndarray:
    """Per-triangle curl of the interpolated cellular stream function plus a mean."""
    x, y = mesh.vertices.T
    psi = amplitude / (2 * np.pi) * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    vals = field_from_stream(mesh, psi).values + np.asarray(mean, dtype=float)[None]
    vals[mesh.tags == SOLID] = 0.0
    return vals
