import numpy as np
import pytest
import scipy.io
from hypothesis import given, settings, strategies as st

from homogfc import fem
from homogfc.errors import AssemblyError, CompatibilityError
from homogfc.geometry import build_cell_geometry, mesh_cell

from conftest import DISK, NONE, cellular


@pytest.mark.parametrize("name", ["disk_mesh", "stripe_mesh", "empty_mesh"])
def test_stiffness_row_sums_vanish(name, request):
    m = request.getfixturevalue(name)
    for space, n in (("full", m.n_dof), ("gas", m.n_gas_dof)):
        K = fem.assemble_stiffness(m, {"gas": 1.0, "solid": 3.0}, space)
        assert np.abs(K @ np.ones(n)).max() < 1e-12
        assert abs(K - K.T).max() == 0.0


def test_stiffness_linear_in_coefficient(disk_mesh):
    K1 = fem.assemble_stiffness(disk_mesh, {"gas": 1.0, "solid": 2.0})
    K2 = fem.assemble_stiffness(disk_mesh, {"gas": 2.0, "solid": 4.0})
    assert abs(K2 - 2 * K1).max() == 0.0


def test_stiffness_rejects_nonpositive_coefficient(disk_mesh):
    with pytest.raises(AssemblyError):
        fem.assemble_stiffness(disk_mesh, {"gas": 1.0, "solid": 0.0})


def test_dirichlet_energy_converges_to_2pi2():
    errs = []
    for h in (0.1, 0.05, 0.025):
        m = mesh_cell(build_cell_geometry(NONE), h)
        x, y = m.dof_coordinates.T
        u = np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
        errs.append(abs(u @ fem.assemble_stiffness(m, 1.0) @ u - 2 * np.pi**2))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.05


def test_mass_matrix_integrates_constants(disk_mesh):
    assert fem.assemble_mass(disk_mesh).sum() == pytest.approx(1.0, abs=1e-13)
    assert fem.assemble_mass(disk_mesh, 1.0, "gas").sum() == pytest.approx(disk_mesh.gas_area, abs=1e-13)
    assert fem.lumped_mass(disk_mesh, "gas").sum() == pytest.approx(disk_mesh.gas_area, abs=1e-13)


def test_zero_velocity_gives_zero_convection(disk_mesh):
    B = fem.assemble_convection(disk_mesh, fem.zero_field(disk_mesh))
    assert B.nnz == 0 or abs(B).max() == 0.0


@pytest.mark.parametrize("name", ["disk_mesh", "stripe_mesh", "empty_mesh"])
def test_projected_cellular_convection_is_skew(name, request):
    m = request.getfixturevalue(name)
    f = cellular(m)
    assert f.divergence_residual(m) < 1e-10
    B = fem.assemble_convection(m, f)
    assert abs(B + B.T).max() <= 1e-8


def test_constant_velocity_on_empty_cell_conserves_energy(empty_mesh):
    raw = np.tile([0.7, -0.4], (len(empty_mesh.triangles), 1))
    f = fem.project_divergence_free(empty_mesh, raw)
    B = fem.assemble_convection(empty_mesh, f)
    u = np.random.default_rng(1).standard_normal(empty_mesh.n_gas_dof)
    assert abs(u @ B @ u) <= 1e-10


def test_unprojected_field_rejected(disk_mesh):
    raw = fem.VelocityField(np.tile([1.0, 0.0], (len(disk_mesh.triangles), 1)))
    with pytest.raises(AssemblyError):
        fem.assemble_convection(disk_mesh, raw)


def test_interface_mass_gives_perimeter():
    g = build_cell_geometry(DISK)
    m = mesh_cell(g, 0.02)
    assert abs(fem.assemble_interface_mass(m).sum() - np.pi / 2) < 1e-3


def test_perimeter_error_converges():
    g = build_cell_geometry(DISK)
    errs = [abs(fem.assemble_interface_mass(mesh_cell(g, h)).sum() - np.pi / 2) for h in (0.1, 0.05, 0.025)]
    assert errs[0] / errs[1] >= 3 and errs[1] / errs[2] >= 3


def test_interface_mass_empty_geometry(empty_mesh):
    G = fem.assemble_interface_mass(empty_mesh)
    assert G.nnz == 0 or abs(G).max() == 0.0


def test_zero_rhs_gives_zero_solution(disk_mesh):
    K = fem.assemble_stiffness(disk_mesh, 1.0)
    assert np.abs(fem.solve_zero_mean(K, np.zeros(disk_mesh.n_dof))).max() == 0.0


def test_fourier_oracle(fine_empty_mesh):
    m = fine_empty_mesh
    x = m.dof_coordinates[:, 0]
    u = np.sin(2 * np.pi * x)
    b = fem.assemble_mass(m) @ u
    lm = fem.lumped_mass(m)
    b -= b.sum() * lm / lm.sum()          # discrete mean is round-off sized, not zero
    s = fem.solve_zero_mean(fem.assemble_stiffness(m, 1.0), b, lm)
    assert np.abs(s - u / (4 * np.pi**2)).max() < 1e-3


def test_constant_rhs_is_incompatible(disk_mesh):
    K = fem.assemble_stiffness(disk_mesh, 1.0)
    with pytest.raises(CompatibilityError):
        fem.solve_zero_mean(K, np.ones(disk_mesh.n_dof))


def test_zero_mean_constraint_holds(disk_mesh):
    K = fem.assemble_stiffness(disk_mesh, {"gas": 1.0, "solid": 5.0})
    r = np.random.default_rng(0).standard_normal(disk_mesh.n_dof)
    r -= r.mean()
    w = fem.lumped_mass(disk_mesh)
    x = fem.solve_zero_mean(K, r, w)
    assert abs(w @ x) < 1e-13
    assert fem.backward_error(K, x, r) < 1e-12


@pytest.mark.parametrize("name", ["disk_mesh", "stripe_mesh"])
def test_projection_is_idempotent(name, request):
    m = request.getfixturevalue(name)
    f = cellular(m)
    g = fem.project_divergence_free(m, f)
    assert np.abs(g.values - f.values).max() <= 1e-9


def test_gradient_field_projects_to_its_mean(empty_mesh):
    m = empty_mesh
    x, y = m.vertices.T
    phi = np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y)
    grads, _ = fem.p1_geometry(m)
    raw = np.einsum("ma,mai->mi", phi[m.triangles], grads) + np.array([0.2, -0.1])
    f = fem.project_divergence_free(m, raw)
    assert np.abs(f.values - [0.2, -0.1]).max() <= 1e-8


def test_stream_function_field_unchanged(empty_mesh):
    m = empty_mesh
    x, y = m.vertices.T
    f0 = fem.field_from_stream(m, np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y))
    f = fem.project_divergence_free(m, f0)
    assert np.abs(f.values - f0.values).max() <= 1e-9


def test_projected_field_has_no_interface_flux(disk_mesh):
    f = cellular(disk_mesh, 2.0)
    jump, trace = f.flux_jumps(disk_mesh)
    assert trace <= 1e-10 * f.sup_norm
    assert jump <= 1e-12


@settings(max_examples=15, deadline=None)
@given(amp=st.floats(0.0, 5.0), mx=st.floats(-2, 2), my=st.floats(-2, 2))
def test_projection_properties(disk_mesh, amp, mx, my):
    f = cellular(disk_mesh, amp, (mx, my))
    assert f.divergence_residual(disk_mesh) < 1e-10
    B = fem.assemble_convection(disk_mesh, f)
    scale = max(1.0, f.sup_norm)
    assert abs(B + B.T).max() <= 1e-12 * scale


def test_dump_operator_roundtrip(tmp_path, disk_mesh):
    K = fem.assemble_stiffness(disk_mesh, 1.0)
    fem.dump_operator(tmp_path / "K.mtx", K, "stiffness")
    back = scipy.io.mmread(str(tmp_path / "K.mtx"))
    assert abs(back - K).max() < 1e-14
