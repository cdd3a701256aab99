import numpy as np
import pytest

from ddrom.decomposition import decompose, extract_submesh, interface_dofs
from ddrom.mesh import generate_unit_cube_mesh


@pytest.fixture(scope="session")
def cube6():
    return generate_unit_cube_mesh(6)


@pytest.fixture(scope="session")
def cube8_dec():
    mesh = generate_unit_cube_mesh(8)
    dec = decompose(mesh, 4, 2, seed=1)
    iface = interface_dofs(mesh, dec)
    subs = [extract_submesh(mesh, dec, i, iface) for i in range(4)]
    return mesh, dec, subs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
