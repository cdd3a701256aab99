import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddrom.mesh import (Mesh, MeshFormatError, MeshValidationError, boundary_nodes, export_mesh,
                        generate_unit_cube_mesh, import_mesh, node_adjacency, signed_volumes)


@pytest.mark.parametrize("d", [2, 3])
@given(n=st.integers(1, 6))
@settings(max_examples=10, deadline=None)
def test_lattice_counts_and_volume(d, n):
    m = generate_unit_cube_mesh(n, dimension=d)
    assert m.n_vertices == (n + 1) ** d
    assert m.n_elements == math.factorial(d) * n**d
    assert m.n_free == (n - 1) ** d
    assert np.isclose(m.volumes().sum(), 1.0)
    assert (signed_volumes(m.vertices, m.elements) > 0).all()


@pytest.mark.parametrize("d,n", [(2, 3), (3, 4), (3, 7)])
def test_diameter_is_cell_diagonal(d, n):
    m = generate_unit_cube_mesh(n, dimension=d)
    assert m.diameter() == pytest.approx(math.sqrt(d) / n, rel=1e-14)


def test_dirichlet_nodes_are_the_boundary():
    m = generate_unit_cube_mesh(4)
    np.testing.assert_array_equal(m.dirichlet_nodes, boundary_nodes(m))
    on_face = ((m.vertices == 0) | (m.vertices == 1)).any(axis=1)
    np.testing.assert_array_equal(np.flatnonzero(on_face), m.dirichlet_nodes)


def test_vertex_numbering_is_lexicographic():
    n = 3
    m = generate_unit_cube_mesh(n)
    for i, j, k in itertools.product(range(n + 1), repeat=3):
        idx = i + (n + 1) * j + (n + 1) ** 2 * k
        np.testing.assert_allclose(m.vertices[idx], [i / n, j / n, k / n])


def test_square_center_adjacency_matches_element_enumeration():
    m = generate_unit_cube_mesh(2, dimension=2)
    pairs = set()
    for el in m.elements:
        for a, b in itertools.permutations(el, 2):
            pairs.add((int(a), int(b)))
    adj = node_adjacency(m)
    assert set(zip(*map(lambda a: a.tolist(), adj.nonzero()))) == pairs
    assert (adj != adj.T).nnz == 0
    centre = 4
    nbrs = set(adj[centre].indices.tolist())
    # the split uses the (0,0)-(1,1) diagonal, so only that diagonal pair connects
    assert nbrs == {1, 3, 5, 7, 0, 8}


def test_round_trip(tmp_path):
    m = generate_unit_cube_mesh(3)
    p = tmp_path / "m.txt"
    export_mesh(m, p)
    m2 = import_mesh(p)
    np.testing.assert_array_equal(m.vertices, m2.vertices)
    np.testing.assert_array_equal(m.elements, m2.elements)
    np.testing.assert_array_equal(m.dirichlet_nodes, m2.dirichlet_nodes)


@pytest.mark.parametrize(
    "text,where",
    [
        ("mesh 3 1\n", ":1"),
        ("mesh 2 3 1\n0 0\n1 0\n0 1\n0 1 5\ndirichlet 0\n", ""),
        ("mesh 2 3 1\n0 0\n1 0\n0 1 2\n", ":4"),
        ("mesh 2 3 1\n0 0\n1 0\n0 1\n0 1 2\ndirichlet 1\n0\nextra\n", ":8"),
        ("mesh 2 3 1\n0 0\n1 0\n", "end of file"),
    ],
)
def test_malformed_files_raise(tmp_path, text, where):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises((MeshFormatError, MeshValidationError)) as exc:
        import_mesh(p)
    assert where in str(exc.value)


def test_degenerate_element_rejected():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    with pytest.raises(MeshValidationError):
        Mesh(v, np.array([[0, 1, 2], [0, 1, 3]]), np.array([], dtype=int))


def test_bad_division_count():
    with pytest.raises(ValueError):
        generate_unit_cube_mesh(0)
