import numpy as np
import pytest

from homogfc.cell import CellOperators
from homogfc.errors import ConfigError, RangeError
from homogfc.kinetics import KineticsParams
from homogfc.macro import (
    MacroGrid,
    MacroOperators,
    MacroSettings,
    MacroSolver,
    MacroState,
    init_macro,
    l2,
    mass,
    periodic_gaussian,
    run_macro,
    shift_field,
)
from homogfc.tensors import TensorTable, build_tensor_table, tensor_grid

from conftest import cellular, setup_cell

ANISO = np.array([[1.0, 0.3], [0.1, 0.6]])
GAUSS_T = {"type": "gaussian", "center": [0.5, 0.5], "width": 0.1, "amplitude": 0.2, "floor": 1.0}
GAUSS_C = {"type": "gaussian", "center": [0.4, 0.6], "width": 0.1, "amplitude": 0.3, "floor": 0.5}


def settings(dt, **kw):
    return MacroSettings(dt=dt, c_eff=kw.pop("c_eff", 1.0), gas_area=kw.pop("gas_area", 1.0), **kw)


def test_constant_state_is_fixed_point():
    g = MacroGrid(32)
    st = init_macro(g, {"type": "constant", "value": 1.3}, {"type": "constant", "value": 0.4})
    traj = run_macro(st, TensorTable.constant(ANISO, 0.5 * ANISO), g, settings(0.01), 5)
    end = traj.snapshots[-1]
    # relative: a few ulp of LU round-off per step
    assert np.abs(end.T0 / 1.3 - 1).max() <= 1e-14 and np.abs(end.C0 / 0.4 - 1).max() <= 1e-14


@pytest.mark.slow
def test_heat_kernel_oracle():
    g, kappa, t_end, dt = MacroGrid(128), 0.1, 0.1, 1e-4
    X, Y = g.mesh()
    c, w = (0.5, 0.5), 0.1
    u0 = periodic_gaussian(X, Y, 1.0, c, w)
    st = MacroState(u0 + 1.0, u0.copy())
    tab = TensorTable.constant(kappa * np.eye(2), kappa * np.eye(2))
    traj = run_macro(st, tab, g, settings(dt), round(t_end / dt))
    exact = periodic_gaussian(X, Y, 1.0, c, w, kappa=kappa, t=t_end)
    end = traj.snapshots[-1]
    assert end.t == pytest.approx(t_end)
    assert l2(end.C0 - exact, g) <= 1e-3
    assert l2(end.T0 - 1.0 - exact, g) <= 1e-3


def test_mass_conserved_with_cross_terms():
    g = MacroGrid(48)
    st = init_macro(g, GAUSS_T, GAUSS_C)
    traj = run_macro(st, TensorTable.constant(ANISO, ANISO.T), g, settings(5e-3), 20)
    assert traj.diagnostics["max_mass_drift"] <= 1e-12
    m = np.array(traj.diagnostics["mass_C"])
    assert np.abs(np.diff(m)).max() <= 1e-12 * m[0]


def test_operator_annihilates_constants_and_is_nonnegative():
    g = MacroGrid(16)
    rng = np.random.default_rng(1)
    K = np.tile(ANISO, (16, 16, 1, 1)) * rng.uniform(0.5, 1.5, (16, 16, 1, 1))
    A = MacroOperators(g).operator(K).toarray()
    assert np.abs(A @ np.ones(256)).max() <= 1e-12
    assert np.abs(np.ones(256) @ A).max() <= 1e-12
    assert np.linalg.eigvalsh(0.5 * (A + A.T)).min() >= -1e-12


def test_zero_steps_returns_initial_state():
    g = MacroGrid(16)
    st = init_macro(g, GAUSS_T, GAUSS_C)
    traj = run_macro(st, TensorTable.constant(np.eye(2), np.eye(2)), g, settings(0.01), 0)
    assert len(traj.snapshots) == 1
    assert np.array_equal(traj.snapshots[0].T0, st.T0)


def test_time_step_refinement_order():
    g = MacroGrid(32)
    st = init_macro(g, GAUSS_T, GAUSS_C)
    tab = TensorTable.constant(ANISO, 0.5 * ANISO.T)
    t_end = 0.02

    def end(n):
        return run_macro(st, tab, g, settings(t_end / n), n).snapshots[-1].C0

    ref = end(640)
    errs = [l2(end(n) - ref, g) for n in (10, 20, 40)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 0.9


def test_offset_frames_without_drift_match_identified():
    g = MacroGrid(24)
    st = init_macro(g, GAUSS_T, GAUSS_C)
    tab = TensorTable(np.array([0.9, 1.4]), np.array([0.4, 0.9]),
                      np.array([[np.eye(2), 2 * np.eye(2)], [np.eye(2), np.eye(2)]]),
                      np.tile(np.eye(2), (2, 2, 1, 1)))
    a = run_macro(st, tab, g, settings(0.01, frames="offset"), 3).snapshots[-1]
    b = run_macro(st, tab, g, settings(0.01, frames="identified"), 3).snapshots[-1]
    assert np.array_equal(a.T0, b.T0) and np.array_equal(a.C0, b.C0)


def test_shift_field_whole_cells_is_roll():
    u = np.random.default_rng(2).random((8, 8))
    assert np.allclose(shift_field(u, (0.25, -0.125), 1.0), np.roll(u, (-2, 1), (0, 1)))


def test_reactive_table_run(disk_mesh, baseline_params):
    kin = KineticsParams(A=1.0, T_a=1.0)
    f, dr = setup_cell(disk_mesh, baseline_params, cellular(disk_mesh))
    ops = CellOperators(baseline_params, disk_mesh, f, dr, kin.Q)
    tab = build_tensor_table(ops, kin, *tensor_grid([0.9, 1.4], 2, [0.4, 0.9], 2))
    g = MacroGrid(32)
    st = init_macro(g, GAUSS_T, GAUSS_C)
    s = settings(1e-3, c_eff=dr.c_eff, gas_area=disk_mesh.gas_area,
                 drift_offset=tuple(dr.b_T - dr.b_C), epsilon=0.25)
    traj = run_macro(st, tab, g, s, 10, snapshot_every=5)
    assert len(traj.snapshots) == 3
    assert traj.diagnostics["max_mass_drift"] <= 1e-12
    assert traj.snapshots[-1].T0.max() < st.T0.max()


def test_state_outside_table_raises():
    g = MacroGrid(16)
    st = init_macro(g, {"type": "constant", "value": 5.0}, {"type": "constant", "value": 0.5})
    tab = TensorTable(np.array([0.9, 1.4]), np.array([0.4, 0.9]),
                      np.tile(np.eye(2), (2, 2, 1, 1)), np.tile(np.eye(2), (2, 2, 1, 1)))
    with pytest.raises(RangeError):
        run_macro(st, tab, g, settings(0.01), 1)


def test_invalid_initial_data_rejected():
    g = MacroGrid(16)
    with pytest.raises(ConfigError, match=r"\(H3\)"):
        init_macro(g, {"type": "gaussian", "amplitude": 1.0, "floor": -2.0}, GAUSS_C)
    with pytest.raises(ConfigError, match=r"\(H3\)"):
        init_macro(g, GAUSS_T, {"type": "constant", "value": -0.1})
    with pytest.raises(ConfigError):
        MacroSolver(g, TensorTable.constant(np.eye(2), np.eye(2)), settings(0.0))


def test_mass_helper():
    g = MacroGrid(10, L=2.0)
    assert mass(np.ones((10, 10)), g) == pytest.approx(4.0)
