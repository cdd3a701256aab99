import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import csgraph

from ddrom.decomposition import (DecompositionError, build_overlap, decompose, extend_subdomain,
                                 hop_ball, interface_dofs, partition_nodes, read_partition, stitch, write_partition)
from ddrom.mesh import generate_unit_cube_mesh, node_adjacency


def connected(adj, nodes):
    sub = adj[nodes][:, nodes]
    return csgraph.connected_components(sub, directed=False)[0] == 1


@given(n=st.integers(1, 12), seed=st.integers(0, 5))
@settings(max_examples=15, deadline=None)
def test_partition_classes_connected_and_balanced(n, seed):
    mesh = generate_unit_cube_mesh(6)
    labels = partition_nodes(mesh, n, seed=seed)
    adj = node_adjacency(mesh)
    assert labels.shape == (mesh.n_vertices,)
    sizes = np.bincount(labels, minlength=n)
    assert sizes.size == n and sizes.min() > 0
    assert sizes.max() <= 3 * sizes.min()
    for i in range(n):
        assert connected(adj, np.flatnonzero(labels == i))


def test_partition_case4_analog():
    mesh = generate_unit_cube_mesh(17)
    labels = partition_nodes(mesh, 6, seed=0)
    adj = node_adjacency(mesh)
    assert np.unique(labels).tolist() == list(range(6))
    for i in range(6):
        assert connected(adj, np.flatnonzero(labels == i))


def test_partition_deterministic_and_errors(cube6):
    np.testing.assert_array_equal(partition_nodes(cube6, 5, seed=3), partition_nodes(cube6, 5, seed=3))
    assert not partition_nodes(cube6, 1).any()
    with pytest.raises(DecompositionError):
        partition_nodes(cube6, 0)
    with pytest.raises(DecompositionError):
        partition_nodes(cube6, cube6.n_free + 1)


def test_partition_file_round_trip(tmp_path, cube6):
    labels = partition_nodes(cube6, 4)
    write_partition(tmp_path / "p.txt", labels)
    np.testing.assert_array_equal(read_partition(tmp_path / "p.txt"), labels)
    (tmp_path / "bad.txt").write_text("0\nx\n")
    with pytest.raises(DecompositionError, match=":2"):
        read_partition(tmp_path / "bad.txt")


def brute_overlap(mesh, labels):
    n = labels.max() + 1
    sub = [set(e for e, el in enumerate(mesh.elements) if (labels[el] == i).any()) for i in range(n)]
    iface = {e for e, el in enumerate(mesh.elements) if len(set(labels[el])) >= 2}
    pairs = {(i, j) for i in range(n) for j in range(i + 1, n) if sub[i] & sub[j]}
    return sub, iface, pairs


@given(seed=st.integers(0, 20), n=st.integers(2, 5))
@settings(max_examples=10, deadline=None)
def test_overlap_matches_brute_force(seed, n):
    mesh = generate_unit_cube_mesh(4, dimension=2)
    labels = np.random.default_rng(seed).integers(0, n, mesh.n_vertices)
    labels[:n] = np.arange(n)
    dec = build_overlap(mesh, labels)
    sub, iface, pairs = brute_overlap(mesh, labels)
    assert [set(s.tolist()) for s in dec.subdomain_elements] == sub
    assert set(dec.interface_elements.tolist()) == iface
    assert set(dec.neighbor_pairs) == pairs
    covered = np.zeros(mesh.n_elements, bool)
    for s in dec.subdomain_elements:
        covered[s] = True
    assert covered.all()


def test_two_label_square_interface_layer():
    mesh = generate_unit_cube_mesh(4, dimension=2)  # (4, 2) split along x
    labels = (mesh.vertices[:, 0] > 0.5).astype(int)
    dec = build_overlap(mesh, labels)
    cx = mesh.vertices[mesh.elements].mean(axis=1)[:, 0]
    # only elements in the column of cells between x=0.5 and x=0.75 touch both classes
    np.testing.assert_array_equal(dec.interface_elements, np.flatnonzero((cx > 0.5) & (cx < 0.75)))
    assert dec.neighbor_pairs == [(0, 1)]


def test_single_subdomain(cube6):
    dec = decompose(cube6, 1, 2)
    assert dec.interface_elements.size == 0 and dec.neighbor_pairs == []
    assert dec.extensions[0].boundary.size == 0
    np.testing.assert_array_equal(dec.owned_dofs[0], cube6.free_nodes)


def test_empty_label_class_rejected(cube6):
    labels = np.zeros(cube6.n_vertices, int)
    labels[0] = 2
    with pytest.raises(DecompositionError):
        build_overlap(cube6, labels)


def test_ownership_and_stitching(cube8_dec, rng):
    mesh, dec, _ = cube8_dec
    owned = np.concatenate(dec.owned_dofs)
    np.testing.assert_array_equal(np.sort(owned), mesh.free_nodes)
    v = np.zeros(mesh.n_vertices)
    v[mesh.free_nodes] = rng.standard_normal(mesh.n_free)
    np.testing.assert_array_equal(stitch(mesh.n_vertices, dec.owned_dofs, [v[o] for o in dec.owned_dofs]), v)


def test_extension_r1_is_graph_neighbourhood(cube8_dec):
    mesh, dec, _ = cube8_dec
    adj = node_adjacency(mesh)
    for s in dec.subdomain_elements:
        ext = extend_subdomain(mesh, s, 1)
        nodes = np.unique(mesh.elements[s])
        expected = np.union1d(nodes, np.unique(adj[nodes].indices))
        np.testing.assert_array_equal(np.unique(mesh.elements[ext.elements]), expected)


def test_extension_invariants(cube8_dec):
    mesh, dec, _ = cube8_dec
    adj = node_adjacency(mesh).astype(float)
    for i, s in enumerate(dec.subdomain_elements):
        prev = s
        for r in (1, 2, 3):
            ext = extend_subdomain(mesh, s, r, adjacency=adj)
            assert set(prev.tolist()) <= set(ext.elements.tolist())
            prev = ext.elements
            assert np.intersect1d(ext.interior, ext.boundary).size == 0
            free_nodes = np.setdiff1d(np.unique(mesh.elements[ext.elements]), mesh.dirichlet_nodes)
            np.testing.assert_array_equal(np.union1d(ext.interior, ext.boundary), free_nodes)
            # B nodes are exactly those also touched by an element outside the extension
            outside = np.setdiff1d(np.arange(mesh.n_elements), ext.elements)
            touched = np.unique(mesh.elements[outside]) if outside.size else np.empty(0, int)
            np.testing.assert_array_equal(ext.boundary, np.intersect1d(free_nodes, touched))
            # extension elements lie within the r-hop ball
            ball = hop_ball(adj, np.unique(mesh.elements[s]), r)
            assert ball[mesh.elements[ext.elements]].all()


def test_saturated_extension(cube6):
    dec = decompose(cube6, 2, 1)
    ext = extend_subdomain(cube6, dec.subdomain_elements[0], 50)
    assert ext.elements.size == cube6.n_elements and ext.boundary.size == 0
    with pytest.raises(DecompositionError):
        extend_subdomain(cube6, dec.subdomain_elements[0], 0)


def test_case4_extension_grows_and_overlap_is_bounded():
    mesh = generate_unit_cube_mesh(17)
    dec = decompose(mesh, 6, 4)
    for i, ext in enumerate(dec.extensions):
        own_dofs = np.setdiff1d(np.unique(mesh.elements[dec.subdomain_elements[i]]), mesh.dirichlet_nodes)
        assert ext.interior.size + ext.boundary.size > own_dofs.size
    assert dec.element_multiplicity(mesh.n_elements).max() <= 8
    assert 1 <= dec.overlap_count(mesh.n_elements) <= 6


def test_submesh_extraction(cube8_dec):
    mesh, dec, subs = cube8_dec
    iface = interface_dofs(mesh, dec)
    for i, sub in enumerate(subs):
        g = sub.global_nodes
        np.testing.assert_array_equal(g[sub.elements], mesh.elements[dec.extensions[i].elements])
        np.testing.assert_array_equal(g[sub.owned], dec.owned_dofs[i])
        np.testing.assert_array_equal(g[sub.interior], dec.extensions[i].interior)
        np.testing.assert_array_equal(g[sub.boundary], dec.extensions[i].boundary)
        np.testing.assert_array_equal(g[sub.owned][sub.interface_rows], np.intersect1d(dec.owned_dofs[i], iface))
        assert sub.omega_elements.size == dec.subdomain_elements[i].size
        assert sub.neighbors.tolist() == dec.neighbors(i)
