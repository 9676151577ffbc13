"""Stage orchestration, manifest-based caching and artifact serialization.

Stages form a small DAG::

    scaling
    drifts -> cell -> tensors -> macro
                           \\---> validate  (also reads drifts)

Each stage hash covers the config fields it reads plus the hashes of its
upstream stages, so changing one field re-runs exactly the dependent stages.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import __version__, fem
from .cell import CellOperators, solve_auxiliary, solve_cell_problems
from .config import RunConfig, dump_json
from .drifts import DriftPair, MaterialParams, effective_drifts
from .errors import ConfigError, HomogError, InvariantViolation
from .geometry import GAS, SOLID, build_cell_geometry, check_mesh, mesh_cell
from .kinetics import CharacteristicScales, KineticsParams, dimensionless_report
from .macro import MacroGrid, MacroSettings, evaluate_profile, init_macro, run_macro
from .micro import ENERGY_TOL, MicroConfig, run_micro, moving_frame_error
from .tensors import (TensorTable, build_tensor_table, coercivity_report, compute_tensors,
                      tensor_grid)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
ECHO = "config.effective.json"
CONVECTION_TOL = 1e-8

_CELL_INPUTS = ("geometry", "materials", "velocity", "seed")


@dataclass(frozen=True)
class Stage:
    name: str
    fields: tuple           # dotted config paths read by the stage
    deps: tuple


STAGES = {
    "scaling": Stage("scaling", ("scales",), ()),
    "drifts": Stage("drifts", _CELL_INPUTS, ()),
    "cell": Stage("cell", _CELL_INPUTS + ("kinetics", "cell"), ("drifts",)),
    "tensors": Stage("tensors", _CELL_INPUTS + ("kinetics", "cell", "table"), ("cell",)),
    "macro": Stage("macro", ("macro",), ("drifts", "tensors")),
    "validate": Stage("validate", ("micro", "macro.N", "macro.L", "macro.frames", "macro.T0",
                                   "macro.C0", "kinetics"), ("drifts", "tensors")),
}
ORDER = ("scaling", "drifts", "cell", "tensors", "macro", "validate")


# ---------------------------------------------------------------------------
# serialization

def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, dump_json(obj))


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    """Shortest round-trip float formatting, LF line endings."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, columns):
    cols = [np.asarray(c).tolist() for c in columns]
    atomic_write(path, csv_text(header, zip(*cols)))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _file_sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _lookup(data, dotted):
    v = data
    for part in dotted.split("."):
        v = v[part]
    return v


def stage_hashes(cfg: RunConfig) -> dict:
    out = {}
    for name in ORDER:
        st = STAGES[name]
        payload = {"version": __version__, "stage": name,
                   "fields": {f: _lookup(cfg.data, f) for f in st.fields},
                   "upstream": {d: out[d] for d in st.deps}}
        out[name] = _sha(json.dumps(payload, sort_keys=True))
    return out


# ---------------------------------------------------------------------------
# in-memory cell objects

def build_velocity(cfg: RunConfig, mesh) -> fem.VelocityField:
    spec = cfg["velocity"]
    kind = spec["type"]
    if kind == "zero":
        return fem.zero_field(mesh)
    solid = mesh.tags == SOLID
    if kind == "constant":
        raw = np.tile(np.asarray(spec["value"], float), (len(mesh.triangles), 1))
    elif kind == "cellular":
        raw = fem.cellular_raw(mesh, float(spec.get("amplitude", 1.0)), spec.get("mean", (0.0, 0.0)))
    else:
        raw = _custom_velocity(cfg.resolve(spec["path"]), mesh)
    raw[solid] = 0.0
    return fem.project_divergence_free(mesh, raw)


def _custom_velocity(path: Path, mesh) -> np.ndarray:
    """Nearest sample (periodic distance) at each triangle centroid."""
    try:
        if path.suffix == ".npy":
            arr = np.load(path)
        else:
            with open(path, encoding="utf-8") as fh:
                first = fh.readline()
            skip = 1 if any(c.isalpha() for c in first.replace("e", "").replace("E", "")) else 0
            arr = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read velocity file {path}: {exc}") from exc
    if arr.ndim != 2 or arr.shape[1] != 4 or not np.isfinite(arr).all():
        raise ConfigError(f"velocity file {path} must hold finite rows x, y, bx, by; "
                          f"bounded values are required per (H2)")
    tree = cKDTree(np.mod(arr[:, :2], 1.0), boxsize=1.0)
    cent = np.mod(mesh.vertices[mesh.triangles].mean(axis=1), 1.0)
    _, idx = tree.query(cent)
    return arr[idx, 2:].copy()


class Workspace:
    """Lazily built cell objects shared between stages of one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    @cached_property
    def params(self):
        return MaterialParams(**{k: float(v) for k, v in self.cfg["materials"].items()})

    @cached_property
    def kinetics(self):
        return KineticsParams(**{k: float(v) for k, v in self.cfg["kinetics"].items()})

    @cached_property
    def geometry(self):
        return build_cell_geometry(self.cfg["geometry"]["inclusion"])

    @cached_property
    def mesh(self):
        m = mesh_cell(self.geometry, float(self.cfg["geometry"]["h"]), seed=int(self.cfg["seed"]))
        check_mesh(m)
        return m

    @cached_property
    def field(self):
        return build_velocity(self.cfg, self.mesh)

    @cached_property
    def drifts(self):
        return effective_drifts(self.params, self.geometry, self.mesh, self.field)

    @cached_property
    def ops(self):
        return CellOperators(self.params, self.mesh, self.field, self.drifts, self.kinetics.Q)


# ---------------------------------------------------------------------------
# stages

def _run_scaling(ws, out):
    rep = dimensionless_report(CharacteristicScales(**ws.cfg["scales"]))
    write_json(out / "scaling.json", rep)
    return ["scaling.json"]


def drifts_record(ws) -> dict:
    from .drifts import compatibility_residuals
    m = ws.mesh
    rec = ws.drifts.to_dict()
    rec.update(residuals=compatibility_residuals(ws.params, m, ws.field, ws.drifts),
               gas_area=m.gas_area, porosity=ws.geometry.porosity,
               velocity={"sup_norm": ws.field.sup_norm,
                         "divergence_residual": ws.field.divergence_residual(m)},
               mesh={"h": m.h, "vertices": len(m.vertices), "triangles": len(m.triangles),
                     "dofs": m.n_dof, "gas_dofs": m.n_gas_dof})
    return rec


def _run_drifts(ws, out):
    write_json(out / "drifts.json", drifts_record(ws))
    return ["drifts.json"]


def cell_record(ws) -> dict:
    c = ws.cfg["cell"]
    aux = solve_auxiliary(ws.params, ws.mesh, ws.field, ws.drifts, ws.ops)
    sol = solve_cell_problems(ws.params, ws.kinetics, ws.mesh, ws.field, ws.drifts,
                              float(c["T0"]), float(c["C0"]), ops=ws.ops)
    rec = sol.to_dict()
    rec.update(dof_coordinates=ws.mesh.dof_coordinates, gas_dof_coordinates=ws.mesh.gas_dof_coordinates,
               auxiliary_residual=aux.residual)
    return rec


def _run_cell(ws, out):
    write_json(out / "cell.json", cell_record(ws))
    return ["cell.json"]


def point_tensors(ws, field=None) -> dict:
    """Tensors and coercivity report at the configured (T0, C0)."""
    c = ws.cfg["cell"]
    if field is None:
        ops, drifts = ws.ops, ws.drifts
    else:
        drifts = effective_drifts(ws.params, ws.geometry, ws.mesh, field)
        ops = CellOperators(ws.params, ws.mesh, field, drifts, ws.kinetics.Q)
    aux = solve_auxiliary(ws.params, ws.mesh, ops.field, drifts, ops)
    sol = solve_cell_problems(ws.params, ws.kinetics, ws.mesh, ops.field, drifts,
                              float(c["T0"]), float(c["C0"]), ops=ops)
    ten = compute_tensors(sol, aux, ops, ws.kinetics)
    rec = ten.to_dict()
    rec["coercivity_report"] = coercivity_report(ten, ops)
    return rec


def table_record(ws) -> TensorTable:
    t = ws.cfg["table"]
    T, C = tensor_grid(t["T0_range"], int(t["n_T0"]), t["C0_range"], int(t["n_C0"]))
    return build_tensor_table(ws.ops, ws.kinetics, T, C, threads=int(ws.cfg["threads"]),
                              midpoint_check=t["midpoint_check"],
                              assert_upper_bound=t["assert_upper_bound"])


def _run_tensors(ws, out):
    point = point_tensors(ws)
    sweep = []
    pe_unit = ws.field.sup_norm * ws.params.c_g / ws.params.lambda_g
    for s in ws.cfg["table"]["peclet_scales"]:
        rec = point if s == 1.0 else point_tensors(ws, ws.field.scaled(float(s)))
        sweep.append({"scale": float(s), "Pe_cell": float(s) * pe_unit,
                      "lambda_eff": rec["lambda_eff"], "D_eff": rec["D_eff"]})
    table = table_record(ws)
    write_json(out / "tensor_table.json", table.to_dict())
    write_json(out / "tensors.json", {"point": point, "peclet_sweep": sweep})
    return ["tensors.json", "tensor_table.json"]


def _load(out, name, stage):
    path = out / name
    if not path.exists():
        raise ConfigError(f"missing artifact {name}; run the '{stage}' stage first")
    return json.loads(path.read_text(encoding="utf-8"))


def _upstream(out):
    d = _load(out, "drifts.json", "drifts")
    drifts = DriftPair(np.array(d["b_T"]), np.array(d["b_C"]), float(d["c_eff"]))
    table = TensorTable.from_dict(_load(out, "tensor_table.json", "tensors"))
    return drifts, float(d["gas_area"]), table


def _run_macro(ws, out):
    mc = ws.cfg["macro"]
    drifts, gas_area, table = _upstream(out)
    grid = MacroGrid(int(mc["N"]), float(mc["L"]))
    state = init_macro(grid, mc["T0"], mc["C0"])
    settings = MacroSettings(dt=float(mc["dt"]), c_eff=drifts.c_eff, gas_area=gas_area,
                             drift_offset=tuple(drifts.b_T - drifts.b_C),
                             epsilon=float(mc["epsilon"]), frames=mc["frames"])
    n_steps = int(round(float(mc["t_end"]) / settings.dt))
    traj = run_macro(state, table, grid, settings, n_steps, int(mc["snapshot_every"]))
    X, Y = grid.mesh()
    files = []
    for k, snap in enumerate(traj.snapshots):
        name = f"macro_snapshot_{k:04d}.csv"
        write_csv(out / name, ["x", "y", "T0", "C0"],
                  [X.ravel(), Y.ravel(), snap.T0.ravel(), snap.C0.ravel()])
        files.append(name)
    diag = dict(traj.diagnostics)
    diag["snapshot_times"] = [s.t for s in traj.snapshots]
    diag["snapshot_files"] = files
    write_json(out / "macro.json", diag)
    return ["macro.json"] + files


def validate_one(ws, n, drifts, gas_area, table) -> dict:
    """Micro run at epsilon = 1/n, matching macro run, moving-frame error."""
    mc, mic = ws.cfg["macro"], ws.cfg["micro"]
    L = float(mc["L"])
    t0 = time.perf_counter()
    cfg = MicroConfig(int(n), float(mic["dt"]), float(mic["T_f"]), int(mic["snapshot_every"]))

    def init(spec, name):
        return lambda x: evaluate_profile(spec, x[:, 0], x[:, 1], L, name)

    micro = run_micro(cfg, ws.mesh, ws.params, ws.kinetics, ws.field,
                      init(mc["T0"], "T0"), init(mc["C0"], "C0"))
    grid = MacroGrid(int(mc["N"]), L)
    settings = MacroSettings(dt=cfg.dt, c_eff=drifts.c_eff, gas_area=gas_area,
                             drift_offset=tuple(drifts.b_T - drifts.b_C), epsilon=cfg.epsilon,
                             frames=mc["frames"])
    macro = run_macro(init_macro(grid, mc["T0"], mc["C0"]), table, grid, settings, cfg.n_steps,
                      cfg.snapshot_every)
    err = moving_frame_error(micro, macro, drifts, cfg.epsilon, L)
    return {"n": int(n), "epsilon": cfg.epsilon, "error": err, "micro": micro.diagnostics,
            "macro_max_mass_drift": macro.diagnostics["max_mass_drift"],
            "runtime": time.perf_counter() - t0, "trajectory": micro}


def _run_validate(ws, out):
    mc, mic = ws.cfg["macro"], ws.cfg["micro"]
    if float(mc["L"]) != 1.0:
        raise ConfigError("validate needs macro.L = 1 (the torus tiled by n x n unit cells)")
    drifts, gas_area, table = _upstream(out)
    eps = list(mic["eps"])
    h = ws.mesh.h
    for n in eps:
        if int(mc["N"]) < n / h:
            log.warning("macro grid N=%d is coarser than the micro resolution n/h=%.0f at n=%d",
                        mc["N"], n / h, n)
    _ = ws.field, ws.ops     # build shared objects before threads start
    with ThreadPoolExecutor(max_workers=max(1, int(ws.cfg["threads"]))) as ex:
        runs = list(ex.map(lambda n: validate_one(ws, n, drifts, gas_area, table), eps))
    files = ["convergence.csv", "validate.json"]
    write_csv(out / "convergence.csv", ["epsilon", "rho_T", "rho_C", "runtime"],
              [[r["epsilon"] for r in runs], [r["error"]["rho_T"] for r in runs],
               [r["error"]["rho_C"] for r in runs], [r["runtime"] for r in runs]])
    for r in runs:
        tr = r["trajectory"]
        last = tr.snapshots[-1]
        for var, coords, vals in (("T", tr.tiled.full_coords, last.T), ("C", tr.tiled.gas_coords, last.C)):
            name = f"micro_n{r['n']}_{var}.csv"
            write_csv(out / name, ["x", "y", var], [coords[:, 0], coords[:, 1], vals])
            files.append(name)
    summary = {"runs": [{k: v for k, v in r.items() if k != "trajectory"} for r in runs],
               "strictly_decreasing": {
                   key: bool(all(a["error"][key] > b["error"][key] for a, b in zip(runs, runs[1:])))
                   for key in ("rho_T", "rho_C")}}
    write_json(out / "validate.json", summary)
    for r in runs:
        d = r["micro"]
        if d["max_energy_inequality"] > ENERGY_TOL:
            raise InvariantViolation(f"energy inequality violated by {d['max_energy_inequality']:.3e} "
                                     f"at n={r['n']}")
        if d["max_convection_energy"] > CONVECTION_TOL:
            raise InvariantViolation(f"convection energy {d['max_convection_energy']:.3e} at n={r['n']}")
    return files


RUNNERS = {"scaling": _run_scaling, "drifts": _run_drifts, "cell": _run_cell,
           "tensors": _run_tensors, "macro": _run_macro, "validate": _run_validate}


# ---------------------------------------------------------------------------
# orchestration

def with_dependencies(stages) -> list:
    need = set()

    def visit(s):
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}; expected one of {list(ORDER)}")
        if s not in need:
            need.add(s)
            for d in STAGES[s].deps:
                visit(d)
    for s in stages:
        visit(s)
    return [s for s in ORDER if s in need]


def _read_manifest(out: Path) -> dict:
    path = out / MANIFEST
    if not path.exists():
        return {"stages": {}}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        log.warning("unreadable manifest in %s; rebuilding", out)
        return {"stages": {}}


def _cache_hit(entry, digest, out) -> bool:
    if not entry or entry.get("hash") != digest:
        return False
    return all((out / f).exists() and _file_sha(out / f) == h for f, h in entry["outputs"].items())


def run_pipeline(cfg: RunConfig, stages, out_dir, force: bool = False) -> dict:
    """Run the requested stages (plus upstream ones) into ``out_dir``.

    Returns {stage: "ran" | "cached"}.  Stage errors keep their class (and
    exit code) and gain the stage name and the path of an error record.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / ECHO, cfg.echo())
    manifest = _read_manifest(out)
    manifest["version"] = __version__
    hashes = stage_hashes(cfg)
    ws = Workspace(cfg)
    status = {}
    for name in with_dependencies(stages):
        entry = manifest["stages"].get(name)
        if not force and _cache_hit(entry, hashes[name], out):
            status[name] = "cached"
            continue
        err_path = out / f"{name}.error.json"
        try:
            files = RUNNERS[name](ws, out)
        except HomogError as exc:
            write_json(err_path, {"stage": name, "type": type(exc).__name__, "message": str(exc)})
            exc.args = (f"stage '{name}' failed: {exc} (diagnostics: {err_path})",)
            raise
        if err_path.exists():
            err_path.unlink()
        manifest["stages"][name] = {"hash": hashes[name], "deps": list(STAGES[name].deps),
                                    "outputs": {f: _file_sha(out / f) for f in files}}
        write_json(out / MANIFEST, manifest)
        status[name] = "ran"
    return status


# ---------------------------------------------------------------------------
# plot data

def emit_plot_data(art_dir, dest=None) -> list:
    """Tidy CSV series from whatever artifacts exist in ``art_dir``."""
    art = Path(art_dir)
    if not art.is_dir():
        raise ConfigError(f"artifact directory {art} does not exist")
    dest = Path(dest) if dest else art / "plots"
    written = []
    conv = art / "convergence.csv"
    if conv.exists():
        rows = read_csv(conv)
        write_csv(dest / "rho_vs_eps.csv", ["epsilon", "n", "rho_T", "rho_C"],
                  [[float(r["epsilon"]) for r in rows], [round(1 / float(r["epsilon"])) for r in rows],
                   [float(r["rho_T"]) for r in rows], [float(r["rho_C"]) for r in rows]])
        written.append("rho_vs_eps.csv")
    tab_path = art / "tensor_table.json"
    if tab_path.exists():
        tab = TensorTable.from_dict(json.loads(tab_path.read_text(encoding="utf-8")))
        rows = [(C, T, tab.lam[i, j, 0, 0]) for j, C in enumerate(tab.C0) for i, T in enumerate(tab.T0)]
        write_csv(dest / "lambda_eff_11_vs_T0.csv", ["C0", "T0", "lambda_11"], list(zip(*rows)))
        long = []
        for i, T in enumerate(tab.T0):
            for j, C in enumerate(tab.C0):
                for name, A in (("lambda", tab.lam), ("D", tab.D)):
                    for a in range(2):
                        for b in range(2):
                            long.append((T, C, f"{name}_{a + 1}{b + 1}", A[i, j, a, b]))
        write_csv(dest / "tensor_vs_T0_C0.csv", ["T0", "C0", "entry", "value"], list(zip(*long)))
        written += ["lambda_eff_11_vs_T0.csv", "tensor_vs_T0_C0.csv"]
    ten_path = art / "tensors.json"
    if ten_path.exists():
        sweep = json.loads(ten_path.read_text(encoding="utf-8"))["peclet_sweep"]
        long = []
        for s in sweep:
            for name in ("lambda_eff", "D_eff"):
                M = np.asarray(s[name])
                for a in range(2):
                    for b in range(2):
                        long.append((s["Pe_cell"], s["scale"], f"{name}_{a + 1}{b + 1}", M[a, b]))
        if long:
            write_csv(dest / "tensor_vs_peclet.csv", ["Pe_cell", "scale", "entry", "value"],
                      list(zip(*long)))
            written.append("tensor_vs_peclet.csv")
    mac_path = art / "macro.json"
    if mac_path.exists():
        diag = json.loads(mac_path.read_text(encoding="utf-8"))
        last = art / diag["snapshot_files"][-1]
        rows = read_csv(last)
        x = np.array([float(r["x"]) for r in rows])
        y = np.array([float(r["y"]) for r in rows])
        N = int(round(np.sqrt(len(rows))))
        mid = np.unique(y)[N // 2]
        sel = y == mid
        write_csv(dest / "field_slice.csv", ["t", "x", "y", "T0", "C0"],
                  [np.full(sel.sum(), diag["snapshot_times"][-1]), x[sel], y[sel],
                   [float(r["T0"]) for r, s in zip(rows, sel) if s],
                   [float(r["C0"]) for r, s in zip(rows, sel) if s]])
        written.append("field_slice.csv")
    if not written:
        raise ConfigError(f"no plottable artifacts in {art}; run the 'tensors', 'macro' or "
                          f"'validate' stage first")
    return written
