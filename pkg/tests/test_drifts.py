import numpy as np
import pytest

from homogfc import fem
from homogfc.drifts import (DriftPair, MaterialParams, compatibility_residuals,
                            effective_drifts, effective_heat_capacity)
from homogfc.errors import ConfigError
from homogfc.geometry import build_cell_geometry, mesh_cell

from conftest import DISK, NONE, cellular

BAND = {"type": "stripe", "axis": 1, "fraction": 0.2}     # solid band y in [0.4, 0.6]


def test_effective_heat_capacity_arithmetic():
    g = build_cell_geometry(BAND)
    assert effective_heat_capacity(MaterialParams(c_g=1.0, c_s=2.0), g) == pytest.approx(1.2)


@pytest.mark.parametrize("spec", [NONE, DISK, BAND])
def test_equal_capacities(spec):
    g = build_cell_geometry(spec)
    assert effective_heat_capacity(MaterialParams(c_g=1.7, c_s=1.7), g) == pytest.approx(1.7)


def test_empty_cell_capacity_is_gas_capacity():
    assert effective_heat_capacity(MaterialParams(c_g=0.6, c_s=9.0), build_cell_geometry(NONE)) == 0.6


def test_material_params_cite_h1():
    with pytest.raises(ConfigError, match=r"c_g must be > 0 per \(H1\)"):
        MaterialParams(c_g=-1.0)


def _uniform(mesh, value):
    raw = np.tile(value, (len(mesh.triangles), 1)).astype(float)
    raw[mesh.tags == 1] = 0.0
    return fem.project_divergence_free(mesh, raw)


def test_constant_flow_empty_cell(empty_mesh):
    dr = effective_drifts(MaterialParams(), empty_mesh.geometry, empty_mesh, _uniform(empty_mesh, [1.0, 0.0]))
    assert np.allclose(dr.b_T, [1, 0], atol=1e-12) and np.allclose(dr.b_C, [1, 0], atol=1e-12)


def test_constant_flow_along_band():
    m = mesh_cell(build_cell_geometry(BAND), 0.05)
    f = _uniform(m, [1.0, 0.0])
    assert np.abs(f.values[m.tags == 0] - [1.0, 0.0]).max() < 1e-12
    dr = effective_drifts(MaterialParams(c_g=1.0, c_s=2.0), m.geometry, m, f)
    assert dr.c_eff == pytest.approx(1.2, abs=1e-12)
    assert np.allclose(dr.b_C, [1, 0], atol=1e-12)
    assert np.allclose(dr.b_T, [2 / 3, 0], atol=1e-12)


def test_zero_mean_cellular_field_has_no_drift(disk_mesh):
    f = cellular(disk_mesh, 1.0, (0.0, 0.0))
    dr = effective_drifts(MaterialParams(c_s=2.0), disk_mesh.geometry, disk_mesh, f)
    assert np.abs(dr.b_T).max() <= 1e-10 and np.abs(dr.b_C).max() <= 1e-10


@pytest.mark.parametrize("name", ["disk_mesh", "stripe_mesh", "empty_mesh"])
def test_residuals_vanish_for_computed_drifts(name, request, baseline_params):
    m = request.getfixturevalue(name)
    f = cellular(m)
    dr = effective_drifts(baseline_params, m.geometry, m, f)
    assert compatibility_residuals(baseline_params, m, f, dr)["max"] <= 1e-10


def test_residual_is_linear_in_drift_error(disk_mesh, baseline_params):
    f = cellular(disk_mesh)
    dr = effective_drifts(baseline_params, disk_mesh.geometry, disk_mesh, f)
    bad = DriftPair(dr.b_T + [0.1, 0.0], dr.b_C, dr.c_eff)
    r = compatibility_residuals(baseline_params, disk_mesh, f, bad)
    assert r["r_T"][0] == pytest.approx(0.1 * dr.c_eff, rel=1e-10)
    assert r["r_T"][1] <= 1e-12


def test_zero_flow_residuals_exactly_zero(disk_mesh, baseline_params):
    f = fem.zero_field(disk_mesh)
    dr = effective_drifts(baseline_params, disk_mesh.geometry, disk_mesh, f)
    assert compatibility_residuals(baseline_params, disk_mesh, f, dr)["max"] == 0.0
    assert not np.any(dr.b_T) and not np.any(dr.b_C)


def test_discrete_capacity_close_to_analytic(disk_mesh, baseline_params):
    dr = effective_drifts(baseline_params, disk_mesh.geometry, disk_mesh, fem.zero_field(disk_mesh))
    exact = effective_heat_capacity(baseline_params, disk_mesh.geometry)
    assert abs(dr.c_eff - exact) < 0.05**2
