import numpy as np
import pytest
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from homogfc import fem
from homogfc.cell import CellOperators
from homogfc.drifts import MaterialParams
from homogfc.errors import ConfigError
from homogfc.geometry import build_cell_geometry, mesh_cell
from homogfc.kinetics import KineticsParams
from homogfc.macro import MacroGrid, MacroSettings, evaluate_profile, init_macro, run_macro
from homogfc.micro import MicroConfig, MicroOperators, TiledMesh, moving_frame_error, run_micro
from homogfc.tensors import TensorTable, build_tensor_table

from conftest import NONE, cellular, setup_cell

OFF = KineticsParams(A=0.0)
T_PROF = {"type": "gaussian", "center": [0.5, 0.5], "width": 0.1, "amplitude": 0.2, "floor": 1.0}
C_PROF = {"type": "gaussian", "center": [0.5, 0.5], "width": 0.1, "amplitude": 0.3, "floor": 0.5}


def profile(spec):
    return lambda x: evaluate_profile(spec, x[:, 0], x[:, 1], 1.0, "init")


def compare(mesh, params, kin, field, n, table, T_spec=T_PROF, C_spec=C_PROF, N=128, dt=1e-3,
            T_f=0.02):
    """Micro run at eps = 1/n against the homogenized run; returns (error dict, micro)."""
    _, dr = setup_cell(mesh, params, field)
    cfg = MicroConfig(n, dt, T_f)
    micro = run_micro(cfg, mesh, params, kin, field, profile(T_spec), profile(C_spec))
    g = MacroGrid(N)
    s = MacroSettings(dt=dt, c_eff=dr.c_eff, gas_area=mesh.gas_area,
                      drift_offset=tuple(dr.b_T - dr.b_C), epsilon=cfg.epsilon)
    macro = run_macro(init_macro(g, T_spec, C_spec), table, g, s, cfg.n_steps, 1)
    return moving_frame_error(micro, macro, dr, cfg.epsilon), micro


def test_tiled_dof_counts(disk_mesh):
    tm = TiledMesh(disk_mesh, 3)
    assert tm.n_full == 9 * disk_mesh.n_dof and tm.n_gas == 9 * disk_mesh.n_gas_dof
    assert (tm.full_coords >= 0).all() and (tm.full_coords < 1).all()
    assert len(np.unique(tm.full_coords.round(12), axis=0)) == tm.n_full


def test_tiled_mass_is_cell_mass(disk_mesh, baseline_params):
    ops = MicroOperators(disk_mesh, 4, baseline_params, cellular(disk_mesh))
    assert ops.M_g.sum() == pytest.approx(disk_mesh.gas_area, rel=1e-12)
    assert abs(ops.B_g @ np.ones(ops.M_g.shape[0])).max() < 1e-12


def test_uniform_state_is_stationary(disk_mesh, baseline_params):
    f = cellular(disk_mesh)
    tm = TiledMesh(disk_mesh, 4)
    tr = run_micro(MicroConfig(4, 1e-2, 0.05), disk_mesh, baseline_params, OFF, f,
                   np.full(tm.n_full, 1.2), np.full(tm.n_gas, 0.7))
    last = tr.snapshots[-1]
    assert np.abs(last.T - 1.2).max() < 1e-12 and np.abs(last.C - 0.7).max() < 1e-12


def test_decoupled_matches_single_fine_mesh():
    """Tiling a coarse empty cell n x n reproduces one fine structured cell."""
    p = MaterialParams(c_g=1.5, lambda_g=0.8, D=0.6)
    coarse = mesh_cell(build_cell_geometry(NONE), 1 / 4)
    fine = mesh_cell(build_cell_geometry(NONE), 1 / 16)
    f = fem.zero_field(coarse)
    dt, steps = 1e-3, 10
    tr = run_micro(MicroConfig(4, dt, steps * dt), coarse, p, OFF, f, profile(T_PROF), profile(C_PROF))

    M = fem.assemble_mass(fine, p.c_g)
    K = fem.assemble_stiffness(fine, p.lambda_g)
    T = profile(T_PROF)(fine.dof_coordinates)
    lu = spla.splu((M / dt + K).tocsc())
    for _ in range(steps):
        T = lu.solve(M @ T / dt)
    idx = cKDTree(fine.dof_coordinates, boxsize=1.0).query(tr.tiled.full_coords % 1.0)[1]
    assert np.abs(tr.snapshots[-1].T - T[idx]).max() <= 1e-8


def test_energy_monitor_reactive_flow(baseline_params):
    m = mesh_cell(build_cell_geometry({"type": "disk", "center": [0.5, 0.5], "radius": 0.25}), 0.1)
    kin = KineticsParams(A=1.0, T_a=1.0)
    tr = run_micro(MicroConfig(4, 1e-3, 0.01), m, baseline_params, kin, cellular(m),
                   profile(T_PROF), profile(C_PROF))
    d = tr.diagnostics
    assert d["max_energy_inequality"] <= 1e-8
    assert d["max_convection_energy"] <= 1e-8
    assert d["max_energy_identity"] <= 1e-8
    assert len(tr.energy) == 10


def test_matched_case_is_close():
    """Empty cell without flow or reaction: micro and macro solve the same heat problem."""
    m = mesh_cell(build_cell_geometry(NONE), 1 / 8)
    p = MaterialParams()
    tab = TensorTable.constant(np.eye(2), np.eye(2))
    err, _ = compare(m, p, OFF, fem.zero_field(m), 4, tab)
    assert err["rho_T"] <= 1e-3 and err["rho_C"] <= 1e-3


def test_shift_by_one_period_leaves_error_unchanged(baseline_params):
    m = mesh_cell(build_cell_geometry({"type": "disk", "center": [0.5, 0.5], "radius": 0.25}), 0.1)
    f = cellular(m)
    _, dr = setup_cell(m, baseline_params, f)
    ops = CellOperators(baseline_params, m, f, dr, OFF.Q)
    tab = build_tensor_table(ops, OFF, [1.0], [0.5])
    a, _ = compare(m, baseline_params, OFF, f, 4, tab)
    shifted = [dict(s, center=[0.75, 0.5]) for s in (T_PROF, C_PROF)]
    b, _ = compare(m, baseline_params, OFF, f, 4, tab, *shifted)
    assert b["rho_T"] == pytest.approx(a["rho_T"], rel=1e-8)
    assert b["rho_C"] == pytest.approx(a["rho_C"], rel=1e-8)


def test_missing_macro_snapshot_rejected(empty_mesh):
    p = MaterialParams()
    f = fem.zero_field(empty_mesh)
    _, dr = setup_cell(empty_mesh, p, f)
    tr = run_micro(MicroConfig(2, 1e-2, 0.02), empty_mesh, p, OFF, f, profile(T_PROF), profile(C_PROF))
    g = MacroGrid(16)
    s = MacroSettings(dt=5e-3, c_eff=1.0, gas_area=1.0)
    macro = run_macro(init_macro(g, T_PROF, C_PROF), TensorTable.constant(np.eye(2), np.eye(2)),
                      g, s, 4, 4)
    with pytest.raises(ConfigError, match="no macro snapshot"):
        moving_frame_error(tr, macro, dr, 0.5)


def test_micro_config_validation():
    with pytest.raises(ConfigError):
        MicroConfig(1, 1e-3, 0.1)
    with pytest.raises(ConfigError):
        MicroConfig(4, 0.0, 0.1)
    assert MicroConfig(8, 1e-3, 0.05).n_steps == 50
