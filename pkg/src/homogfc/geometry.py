"""Periodic unit cell with an optional solid inclusion, and its triangulation.

The cell is Y = [0, 1]^2. The mesher builds a point set (a hexagonal lattice
plus constraint points placed exactly on the cell boundary and on the
gas/solid interface), triangulates a 3x3 periodic tiling of it with Qhull and
keeps the triangles whose centroid lies in the open cell.  Constraint
segments are protected by emptying their diametral circles, which makes them
Delaunay edges, so the result is interface- and boundary-conforming without a
constrained-Delaunay kernel.

A disk centred in the cell is meshed on one eighth of the cell and reflected
through the symmetries of the square, so b = 0 tensors are isotropic exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import GeometryError, MeshError

GAS = 0
SOLID = 1

_SHAPES = ("none", "disk", "stripe")


@dataclass(frozen=True)
class CellGeometry:
    """Unit cell Y = Y_g + Y_s.

    ``kind`` is one of ``none``, ``disk`` or ``stripe``.  A stripe is a solid
    band centred on the cell whose layers are normal to ``axis`` and whose
    solid volume fraction is ``fraction``.
    """

    kind: str = "none"
    center: tuple[float, float] = (0.5, 0.5)
    radius: float = 0.0
    axis: int = 0
    fraction: float = 0.0
    dimension: int = 2

    @property
    def solid_area(self) -> float:
        if self.kind == "disk":
            return math.pi * self.radius**2
        if self.kind == "stripe":
            return self.fraction
        return 0.0

    @property
    def porosity(self) -> float:
        return 1.0 - self.solid_area

    @property
    def perimeter(self) -> float:
        """Analytic measure of the interface per cell."""
        if self.kind == "disk":
            return 2.0 * math.pi * self.radius
        if self.kind == "stripe":
            return 2.0
        return 0.0

    @property
    def stripe_bounds(self) -> tuple[float, float]:
        return 0.5 - 0.5 * self.fraction, 0.5 + 0.5 * self.fraction

    def is_solid(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "disk":
            d = np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1])
            return d < self.radius
        if self.kind == "stripe":
            lo, hi = self.stripe_bounds
            c = pts[:, self.axis]
            return (c > lo) & (c < hi)
        return np.zeros(len(pts), dtype=bool)

    def to_dict(self) -> dict:
        if self.kind == "disk":
            return {"type": "disk", "center": list(self.center), "radius": self.radius}
        if self.kind == "stripe":
            return {"type": "stripe", "axis": self.axis, "fraction": self.fraction}
        return {"type": "none"}


def build_cell_geometry(spec) -> CellGeometry:
    """Validate a geometry description (dict or CellGeometry)."""
    if isinstance(spec, CellGeometry):
        spec = spec.to_dict()
    if not isinstance(spec, dict):
        raise GeometryError(f"geometry spec must be an object, got {type(spec).__name__}")
    kind = spec.get("type", "none")
    if kind not in _SHAPES:
        raise GeometryError(f"unknown inclusion type {kind!r}; expected one of {_SHAPES}")
    allowed = {"none": {"type"}, "disk": {"type", "center", "radius"},
               "stripe": {"type", "axis", "fraction"}}[kind]
    extra = set(spec) - allowed
    if extra:
        raise GeometryError(f"unknown keys for {kind} inclusion: {sorted(extra)}")

    if kind == "none":
        return CellGeometry()
    if kind == "disk":
        center = tuple(float(c) for c in spec.get("center", (0.5, 0.5)))
        radius = float(spec["radius"]) if "radius" in spec else None
        if radius is None or len(center) != 2:
            raise GeometryError("disk needs a radius and a 2D center")
        if not radius > 0:
            raise GeometryError(f"disk radius must be > 0, got {radius}")
        dist = min(center[0], 1 - center[0], center[1], 1 - center[1])
        if not dist > radius:
            raise GeometryError(
                f"disk (center={center}, r={radius}) touches the cell boundary: "
                f"distance {dist:.6g} <= radius; the interface must be interior")
        return CellGeometry(kind="disk", center=center, radius=radius)
    axis = int(spec.get("axis", 0))
    fraction = float(spec.get("fraction", -1))
    if axis not in (0, 1):
        raise GeometryError(f"stripe axis must be 0 or 1, got {axis}")
    if not 0 < fraction < 1:
        raise GeometryError(f"stripe fraction must lie in (0, 1), got {fraction}")
    return CellGeometry(kind="stripe", axis=axis, fraction=fraction)


def porosity(geom: CellGeometry) -> float:
    return geom.porosity


@dataclass(frozen=True, eq=False)
class PeriodicMesh:
    """Interface-conforming triangulation of the unit cell.

    Vertices on x=1 (y=1) are geometric copies of those on x=0 (y=0);
    ``dof`` merges them and ``shift`` records the integer offset of each
    vertex from its representative, which is what tiling needs.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    tags: np.ndarray
    interface_edges: np.ndarray
    interface_normals: np.ndarray
    periodic_pairs: np.ndarray
    h: float
    geometry: CellGeometry = field(default_factory=CellGeometry)
    dof: np.ndarray = None
    shift: np.ndarray = None
    n_dof: int = 0
    gas_dof: np.ndarray = None
    n_gas_dof: int = 0

    @property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    @property
    def gas_area(self) -> float:
        return float(self.areas[self.tags == GAS].sum())

    @property
    def solid_area(self) -> float:
        return float(self.areas[self.tags == SOLID].sum())

    @property
    def interface_lengths(self) -> np.ndarray:
        e = self.vertices[self.interface_edges]
        return np.hypot(*(e[:, 1] - e[:, 0]).T)

    @property
    def dof_coordinates(self) -> np.ndarray:
        """Coordinates of each periodic DOF (taken from its representative vertex)."""
        out = np.empty((self.n_dof, 2))
        rep = (self.shift == 0).all(axis=1)
        out[self.dof[rep]] = self.vertices[rep]
        return out

    @property
    def gas_dof_coordinates(self) -> np.ndarray:
        full = self.dof_coordinates
        out = np.empty((self.n_gas_dof, 2))
        mask = self.gas_dof >= 0
        out[self.gas_dof[mask]] = full[self.dof[mask]]
        return out

    @property
    def gas_to_full(self) -> np.ndarray:
        """Map gas DOF index -> full-cell DOF index."""
        out = np.empty(self.n_gas_dof, dtype=np.int64)
        mask = self.gas_dof >= 0
        out[self.gas_dof[mask]] = self.dof[mask]
        return out

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "h": self.h,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "tags": ["gas" if t == GAS else "solid" for t in self.tags],
            "interface_edges": self.interface_edges.tolist(),
            "interface_normals": self.interface_normals.tolist(),
            "periodic_pairs": self.periodic_pairs.tolist(),
        }


# ---------------------------------------------------------------------------
# point-set construction


def _lattice(h):
    nx = max(4, math.ceil(1.0 / h))
    ny = max(4, math.ceil(1.0 / (h * math.sqrt(3) / 2)))
    ny += ny % 2  # odd row offset must be periodic
    dx, dy = 1.0 / nx, 1.0 / ny
    pts = []
    for j in range(ny):
        xs = (np.arange(nx) + 0.5 * (j % 2)) * dx
        pts.append(np.column_stack([xs, np.full(nx, j * dy)]))
    return np.vstack(pts), dx, dy, ny


def _ring(center, radius, n, phase):
    t = phase + 2 * np.pi * np.arange(n) / n
    return np.column_stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)])


def _closed_chain(idx_sorted):
    return np.column_stack([idx_sorted, np.roll(idx_sorted, -1)])


def _point_set(geom: CellGeometry, h: float, seed: int):
    """Return (points, is_constraint, segments) in [0, 1)^2 (periodic)."""
    lattice, dx, dy, ny = _lattice(h)
    rows = np.arange(ny) * dy
    free = lattice[(lattice[:, 0] > 0) & (lattice[:, 1] > 0)]
    bottom_x = list(lattice[lattice[:, 1] == 0, 0])
    left_y = list(rows[1:])
    special = []          # non-constraint points that should survive lattice pruning
    interface_pts = []
    interface_segs = []

    if geom.kind == "stripe":
        lo, hi = geom.stripe_bounds
        line_y = rows
        for c in (lo, hi):
            # bottom boundary gets the line foot; drop lattice feet too close to it
            bottom_x = [x for x in bottom_x if abs(x - c) > 0.3 * dx]
            bottom_x.append(c)
            free = free[np.abs(free[:, 0] - c) > 0.3 * dx]
            start = len(interface_pts)
            interface_pts.extend([(c, y) for y in line_y[1:]])
            # chain (c,0) -> (c,y1) -> ... -> (c,1)=(c,0); resolved after indexing
            interface_segs.append(("line", c, start, len(line_y) - 1))
    elif geom.kind == "disk":
        c, r = geom.center, geom.radius
        nc = max(12, math.ceil(2 * math.pi * r / h))
        chord = 2 * r * math.sin(math.pi / nc)
        delta = math.sqrt(3) / 2 * chord
        circle = _ring(c, r, nc, 0.0)
        start = len(interface_pts)
        interface_pts.extend(map(tuple, circle))
        interface_segs.append(("ring", None, start, nc))
        wall = min(c[0], 1 - c[0], c[1], 1 - c[1])
        keep_out = r + 0.6 * chord
        if r + delta + 0.35 * h <= wall:
            special.append(_ring(c, r + delta, nc, math.pi / nc))
            keep_out = r + delta + 0.5 * h
        rk, k = r - delta, 1
        while rk > 0.5 * delta:
            nk = max(6, round(2 * math.pi * rk / chord))
            special.append(_ring(c, rk, nk, (k % 2) * math.pi / nk))
            k += 1
            rk = r - k * delta
        special.append(np.array([c]))
        d = np.hypot(free[:, 0] - c[0], free[:, 1] - c[1])
        free = free[d > keep_out]

    if seed:
        rng = np.random.default_rng(seed)
        free = np.mod(free + rng.uniform(-0.15, 0.15, free.shape) * h, 1.0)

    boundary = [(x, 0.0) for x in sorted(bottom_x)] + [(0.0, y) for y in left_y]
    constraint = np.array(boundary + interface_pts, dtype=float)
    others = np.vstack([free] + special) if special else free
    others = others[(others >= 0).all(axis=1) & (others < 1).all(axis=1)]

    n_b = len(boundary)
    segs = []
    bx = [i for i, p in enumerate(boundary) if p[1] == 0.0]
    bx = sorted(bx, key=lambda i: boundary[i][0])
    segs.append(_closed_chain(np.array(bx)))
    by = [bx[0]] + [i for i, p in enumerate(boundary) if p[0] == 0.0 and p[1] > 0]
    segs.append(_closed_chain(np.array(by)))
    for kind, cval, start, n in interface_segs:
        idx = n_b + start + np.arange(n)
        if kind == "ring":
            segs.append(_closed_chain(idx))
        else:
            foot = next(i for i, p in enumerate(boundary) if p[1] == 0.0 and p[0] == cval)
            segs.append(_closed_chain(np.concatenate([[foot], idx])))
    segments = np.vstack(segs)

    # protect constraint segments: empty their diametral circles (periodic metric)
    cp = constraint
    a, b = cp[segments[:, 0]], cp[segments[:, 1]]
    dvec = b - a
    dvec -= np.round(dvec)          # wrap-around segments
    mid = np.mod(a + 0.5 * dvec, 1.0)
    rad = 0.5 * np.hypot(*dvec.T)
    tree = cKDTree(others, boxsize=1.0)
    drop = set()
    for m, rr in zip(mid, rad):
        drop.update(tree.query_ball_point(m, 1.05 * rr))
    too_close = cKDTree(cp, boxsize=1.0).query(others, k=1)[0] < 0.3 * h
    keep = np.ones(len(others), dtype=bool)
    keep[list(drop)] = False
    keep &= ~too_close
    others = others[keep]

    pts = np.vstack([cp, others])
    is_con = np.zeros(len(pts), dtype=bool)
    is_con[: len(cp)] = True
    return pts, is_con, segments


def _structured(h):
    n = max(2, math.ceil(1.0 / h - 1e-12))
    g = np.arange(n + 1) / n
    X, Y = np.meshgrid(g, g, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    tris = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return verts, tris


def _periodic_delaunay(pts):
    shifts = np.array([(i, j) for j in (-1, 0, 1) for i in (-1, 0, 1)], dtype=float)
    tiled = (pts[None, :, :] + shifts[:, None, :]).reshape(-1, 2)
    tri = Delaunay(tiled).simplices
    cen = tiled[tri].mean(axis=1)
    inside = (cen > 0).all(axis=1) & (cen < 1).all(axis=1)
    tri = tri[inside]
    used, inv = np.unique(tri.ravel(), return_inverse=True)
    return tiled[used], inv.reshape(-1, 3)


# signed permutations: the symmetry group of the square about its centre
_D4 = [np.array(m, dtype=float) for m in (
    [[1, 0], [0, 1]], [[0, 1], [1, 0]], [[-1, 0], [0, 1]], [[1, 0], [0, -1]],
    [[-1, 0], [0, -1]], [[0, -1], [1, 0]], [[0, 1], [-1, 0]], [[0, -1], [-1, 0]])]


def _subdivide(a, b, n):
    t = np.arange(1, n)[:, None] / n
    return a + t * (b - a)


def _octant_points(geom: CellGeometry, h: float, seed: int):
    """Point set and constraint segments for F = {0.5 <= y <= x <= 1}."""
    c, r = np.array([0.5, 0.5]), geom.radius
    nc = 8 * max(2, math.ceil(2 * math.pi * r / h / 8))
    chord = 2 * r * math.sin(math.pi / nc)
    delta = math.sqrt(3) / 2 * chord
    diag = np.array([1.0, 1.0]) / math.sqrt(2)

    def ring(rad, n):
        k = np.arange(n // 8 + 1)
        t = 2 * np.pi * k / n
        return c + rad * np.column_stack([np.cos(t), np.sin(t)])

    # radii carrying a ring; each ring has a point on both mirror lines
    radii = []
    rk, k = r - delta, 1
    while rk > 0.5 * delta:
        radii.append(rk)
        k += 1
        rk = r - k * delta
    radii = radii[::-1]
    outer = r + delta + 0.35 * h <= 0.5
    con = [c[None]]
    for rad in radii:
        con.append(ring(rad, max(8, 8 * round(2 * math.pi * rad / chord / 8))))
    con.append(ring(r, nc))
    if outer:
        con.append(ring(r + delta, nc))
    start = r + delta if outer else r
    foot_b, foot_d = c + [start, 0.0], c + start * diag
    con.append(_subdivide(foot_b, np.array([1.0, 0.5]), max(1, math.ceil((0.5 - start) / h))))
    con.append(_subdivide(foot_d, np.array([1.0, 1.0]),
                          max(1, math.ceil((math.sqrt(0.5) - start) / h))))
    con.append(np.array([[1.0, 0.5], [1.0, 1.0]]))
    con.append(_subdivide(np.array([1.0, 0.5]), np.array([1.0, 1.0]), math.ceil(0.5 / h)))
    con = np.vstack(con)
    con = np.unique(con.round(15), axis=0)

    # segments: consecutive constraint points along each octant edge and the arc
    def chain(mask, key):
        idx = np.nonzero(mask)[0]
        idx = idx[np.argsort(key[idx])]
        return np.column_stack([idx[:-1], idx[1:]])
    tol = 1e-12
    d = con - c
    ang = np.arctan2(d[:, 1], d[:, 0])
    segs = [chain(np.abs(d[:, 1]) < tol, d[:, 0]),
            chain(np.abs(d[:, 0] - d[:, 1]) < tol, d[:, 0]),
            chain(np.abs(con[:, 0] - 1.0) < tol, con[:, 1]),
            chain(np.abs(np.hypot(*d.T) - r) < tol, ang)]
    segs = np.vstack(segs)

    # free points: hexagonal lattice strictly inside F, outside the disk
    lat, dx, dy, _ = _lattice(h)
    free = lat * 1.0
    if seed:
        rng = np.random.default_rng(seed)
        free = free + rng.uniform(-0.15, 0.15, free.shape) * h
    fx, fy = free[:, 0], free[:, 1]
    margin = 0.3 * h
    keep_out = (r + delta + 0.5 * h) if outer else (r + 0.6 * chord)
    inside = ((fy > 0.5 + margin) & (fy < fx - margin * math.sqrt(2)) & (fx < 1 - margin)
              & (np.hypot(fx - 0.5, fy - 0.5) > keep_out))
    free = free[inside]
    if len(free):
        too_close = cKDTree(con).query(free, k=1)[0] < 0.3 * h
        free = free[~too_close]
    if len(free):
        a, b = con[segs[:, 0]], con[segs[:, 1]]
        tree = cKDTree(free)
        drop = set()
        for m, rr in zip(0.5 * (a + b), 0.5 * np.hypot(*(b - a).T)):
            drop.update(tree.query_ball_point(m, 1.05 * rr))
        keep = np.ones(len(free), dtype=bool)
        keep[list(drop)] = False
        free = free[keep]
    return np.vstack([con, free])


def _symmetric_disk_mesh(geom: CellGeometry, h: float, seed: int):
    """Triangulate one octant and reflect it, so the mesh has the square's symmetry."""
    pts = _octant_points(geom, h, seed)
    c = np.array([0.5, 0.5])
    images = np.unique(np.vstack([c + (pts - c) @ M.T for M in _D4]), axis=0)
    images = images[(images < 1.0).all(axis=1)]
    verts_all, tris_all = _periodic_delaunay(images)
    cen = verts_all[tris_all].mean(axis=1)
    tol = 1e-12
    inF = (cen[:, 1] > 0.5 + tol) & (cen[:, 1] < cen[:, 0] - tol) & (cen[:, 0] < 1.0 - tol)
    octant = verts_all[tris_all[inF]]                     # (k, 3, 2)
    tri_pts = np.vstack([c + (octant - c) @ M.T for M in _D4]).reshape(-1, 2)
    verts, inv = np.unique(tri_pts, axis=0, return_inverse=True)
    return verts, inv.reshape(-1, 3)


def mesh_cell(geom: CellGeometry, h: float, seed: int = 0) -> PeriodicMesh:
    """Triangulate the unit cell with target mesh size ``h``."""
    if not 0 < h < 0.5:
        raise MeshError(f"mesh size must lie in (0, 0.5), got {h}")
    geom = build_cell_geometry(geom)
    if geom.kind == "none":
        verts, tris = _structured(h)
    elif geom.kind == "disk" and geom.center == (0.5, 0.5):
        verts, tris = _symmetric_disk_mesh(geom, h, seed)
    else:
        g = geom
        if geom.kind == "stripe" and geom.axis == 1:
            g = CellGeometry(kind="stripe", axis=0, fraction=geom.fraction)
        pts, _, _ = _point_set(g, h, seed)
        if g is not geom:
            pts = pts[:, ::-1].copy()
        verts, tris = _periodic_delaunay(pts)

    p = verts[tris]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    flip = area < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    area = np.abs(area)
    bad = area < 1e-8 * h * h
    if bad.any():
        k = int(np.argmax(bad))
        raise MeshError("degenerate triangle produced by the mesher",
                        region=f"near {verts[tris[k]].mean(axis=0).round(4).tolist()}")
    tags = np.where(geom.is_solid(verts[tris].mean(axis=1)), SOLID, GAS).astype(np.int8)
    return _finalize(geom, h, verts, tris, tags)


def _finalize(geom, h, verts, tris, tags) -> PeriodicMesh:
    # interface edges: shared by one gas and one solid triangle
    edges = np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    owner = np.tile(np.arange(len(tris)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    same = (edges[1:] == edges[:-1]).all(axis=1)
    i0 = np.nonzero(same)[0]
    t0, t1 = owner[i0], owner[i0 + 1]
    mixed = tags[t0] != tags[t1]
    iedges = edges[i0[mixed]]
    gas_tri = np.where(tags[t0[mixed]] == GAS, t0[mixed], t1[mixed])
    normals = np.zeros((len(iedges), 2))
    if len(iedges):
        d = verts[iedges[:, 1]] - verts[iedges[:, 0]]
        n = np.column_stack([d[:, 1], -d[:, 0]]) / np.hypot(d[:, 0], d[:, 1])[:, None]
        gas_c = verts[tris[gas_tri]].mean(axis=1)
        # orient from gas into solid
        s = np.sign(((gas_c - verts[iedges[:, 0]]) * n).sum(axis=1))
        n *= -s[:, None]
        normals = n

    # periodic identification
    key = np.mod(verts, 1.0)
    shift = np.rint(verts - key).astype(np.int64)
    rep = (shift == 0).all(axis=1)
    lookup = {}
    dof = np.empty(len(verts), dtype=np.int64)
    n_dof = 0
    for v in np.nonzero(rep)[0]:
        lookup[tuple(key[v])] = n_dof
        dof[v] = n_dof
        n_dof += 1
    for v in np.nonzero(~rep)[0]:
        try:
            dof[v] = lookup[tuple(key[v])]
        except KeyError:
            raise MeshError("boundary vertex without periodic partner",
                            region=verts[v].tolist()) from None
    pairs = []
    for ax in (0, 1):
        for v in np.nonzero(verts[:, ax] == 1.0)[0]:
            target = verts[v].copy()
            target[ax] = 0.0
            match = np.nonzero((verts == target).all(axis=1))[0]
            if len(match) != 1:
                raise MeshError("periodic partner not unique", region=verts[v].tolist())
            pairs.append((int(match[0]), int(v)))
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)

    gas_vert = np.zeros(len(verts), dtype=bool)
    gas_vert[tris[tags == GAS].ravel()] = True
    gas_dof_of_dof = -np.ones(n_dof, dtype=np.int64)
    gas_dofs = np.unique(dof[gas_vert])
    gas_dof_of_dof[gas_dofs] = np.arange(len(gas_dofs))
    gas_dof = np.where(gas_vert, gas_dof_of_dof[dof], -1)

    return PeriodicMesh(
        vertices=verts, triangles=tris.astype(np.int64), tags=tags,
        interface_edges=iedges.astype(np.int64), interface_normals=normals,
        periodic_pairs=pairs, h=float(h), geometry=geom,
        dof=dof, shift=shift, n_dof=n_dof, gas_dof=gas_dof, n_gas_dof=len(gas_dofs),
    )


def check_mesh(mesh: PeriodicMesh, tol: float = 1e-12) -> None:
    """Raise MeshError if any PeriodicMesh invariant fails."""
    areas = mesh.areas
    if (areas <= 0).any():
        raise MeshError("non-positive triangle area")
    if abs(areas.sum() - 1.0) > tol:
        raise MeshError(f"triangle areas sum to {areas.sum()!r}, not 1")
    geom = mesh.geometry
    if geom.kind != "none":
        v = mesh.vertices[mesh.triangles]
        if geom.kind == "disk":
            d = np.hypot(v[..., 0] - geom.center[0], v[..., 1] - geom.center[1])
            slack = 1e-9
            bad_g = (mesh.tags == GAS) & (d < geom.radius - slack).any(axis=1)
            bad_s = (mesh.tags == SOLID) & (d > geom.radius + slack).any(axis=1)
        else:
            lo, hi = geom.stripe_bounds
            c = v[..., geom.axis]
            bad_g = (mesh.tags == GAS) & ((c > lo + 1e-12) & (c < hi - 1e-12)).any(axis=1)
            bad_s = (mesh.tags == SOLID) & ((c < lo - 1e-12) | (c > hi + 1e-12)).any(axis=1)
        if bad_g.any() or bad_s.any():
            raise MeshError("triangle straddles the interface")
    n = mesh.interface_normals
    if len(n) and np.abs(np.hypot(n[:, 0], n[:, 1]) - 1).max() > tol:
        raise MeshError("interface normals are not unit length")
    p = mesh.periodic_pairs
    if len(p):
        a, b = mesh.vertices[p[:, 0]], mesh.vertices[p[:, 1]]
        diff = np.abs(b - a)
        ok = ((np.abs(diff[:, 0] - 1) <= tol) & (diff[:, 1] <= tol)) | \
             ((np.abs(diff[:, 1] - 1) <= tol) & (diff[:, 0] <= tol))
        if not ok.all():
            raise MeshError("periodic pair coordinates do not match")
        if len(set(map(tuple, p.tolist()))) != len(p) or (p[:, 0] == p[:, 1]).any():
            raise MeshError("periodic pairs are not a bijection")
