import numpy as np
import pytest

from homogfc import fem
from homogfc.drifts import MaterialParams, effective_drifts
from homogfc.geometry import build_cell_geometry, mesh_cell

DISK = {"type": "disk", "center": [0.5, 0.5], "radius": 0.25}
STRIPE = {"type": "stripe", "axis": 0, "fraction": 0.4}
NONE = {"type": "none"}


@pytest.fixture(scope="session")
def disk_mesh():
    return mesh_cell(build_cell_geometry(DISK), 0.05)


@pytest.fixture(scope="session")
def stripe_mesh():
    return mesh_cell(build_cell_geometry(STRIPE), 0.05)


@pytest.fixture(scope="session")
def empty_mesh():
    return mesh_cell(build_cell_geometry(NONE), 0.05)


@pytest.fixture(scope="session")
def fine_empty_mesh():
    return mesh_cell(build_cell_geometry(NONE), 0.02)


@pytest.fixture(scope="session")
def baseline_params():
    return MaterialParams(c_g=1.0, c_s=2.0, lambda_g=1.0, lambda_s=3.0, D=1.0)


def cellular(mesh, amp=1.0, mean=(0.3, 0.1)):
    return fem.project_divergence_free(mesh, fem.cellular_raw(mesh, amp, mean))


def setup_cell(mesh, params, field=None):
    field = field if field is not None else fem.zero_field(mesh)
    return field, effective_drifts(params, mesh.geometry, mesh, field)


def rng(seed=0):
    return np.random.default_rng(seed)
