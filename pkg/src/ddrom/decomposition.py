"""Node partitioning, overlapping subdomains, hop extensions and stitching.

Subdomain ids are zero-based.  A subdomain ``omega_i`` is the set of elements
with at least one node labelled ``i``; two subdomains therefore overlap in a
single layer of elements.  Every free node is owned by exactly one subdomain
(its label), which is what the stitching operator keeps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .mesh import Mesh, node_adjacency


class DecompositionError(ValueError):
    pass


@dataclass
class Extension:
    elements: np.ndarray  # element ids of omega_i^+
    interior: np.ndarray  # I: free nodes of omega_i^+ off its artificial boundary
    boundary: np.ndarray  # B: free nodes on the boundary of omega_i^+ minus the Dirichlet part


@dataclass
class Decomposition:
    labels: np.ndarray
    subdomain_elements: list
    owned_dofs: list  # free nodes labelled i, ascending
    interface_elements: np.ndarray  # omega_0
    neighbor_pairs: list  # sorted (i, j) with i < j
    r_hops: int = 0
    extensions: list = field(default_factory=list)

    @property
    def n_subdomains(self) -> int:
        return len(self.subdomain_elements)

    def neighbors(self, i: int) -> list:
        return sorted({j for p in self.neighbor_pairs if i in p for j in p if j != i})

    def element_multiplicity(self, n_elements: int, extended: bool = False) -> np.ndarray:
        sets = [e.elements for e in self.extensions] if extended else self.subdomain_elements
        count = np.zeros(n_elements, dtype=np.int64)
        for s in sets:
            count[s] += 1
        return count

    def overlap_count(self, n_elements: int) -> int:
        """Largest number of extended meshes sharing one element."""
        return int(self.element_multiplicity(n_elements, extended=True).max(initial=0))


def _bfs_distances(adj: sparse.csr_matrix, sources) -> np.ndarray:
    return csgraph.dijkstra(adj, unweighted=True, indices=np.atleast_1d(sources), min_only=True)


def _farthest_point_seeds(adj, n, rng) -> np.ndarray:
    nv = adj.shape[0]
    first = int(rng.integers(nv))
    # start from the node farthest from a random one so the seed set is spread
    d = _bfs_distances(adj, first)
    seeds = [int(np.argmax(d))]
    dist = _bfs_distances(adj, seeds[0])
    for _ in range(1, n):
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        dist = np.minimum(dist, _bfs_distances(adj, nxt))
    return np.asarray(seeds)


def _grow(adj: sparse.csr_matrix, seeds: np.ndarray) -> np.ndarray:
    """Balanced multi-source BFS: each round, classes below the running target claim one layer."""
    nv = adj.shape[0]
    n = len(seeds)
    labels = np.full(nv, -1, dtype=np.int64)
    labels[seeds] = np.arange(n)
    frontiers = [np.array([s]) for s in seeds]
    sizes = np.ones(n, dtype=np.int64)
    target = nv / n
    while (labels < 0).any():
        active = [i for i in range(n) if frontiers[i].size]
        if not active:
            # disconnected leftovers: attach to an arbitrary class, repaired later
            labels[labels < 0] = 0
            break
        quota = max(sizes[active].min(), 1) * 1.05
        allowed = [i for i in active if sizes[i] <= quota or sizes[i] < target]
        order = sorted(allowed or active, key=lambda i: sizes[i])
        for i in order:
            nbrs = np.unique(adj[frontiers[i]].indices)
            new = nbrs[labels[nbrs] < 0]
            labels[new] = i
            sizes[i] += new.size
            frontiers[i] = new
    return labels


def _repair(adj: sparse.csr_matrix, labels: np.ndarray, n: int) -> np.ndarray:
    """Make every label class connected by moving stray components to a touching class."""
    labels = labels.copy()
    coo = adj.tocoo()
    for _ in range(100):
        changed = False
        for i in range(n):
            nodes = np.flatnonzero(labels == i)
            if nodes.size == 0:
                continue
            sub = adj[nodes][:, nodes]
            ncomp, comp = csgraph.connected_components(sub, directed=False)
            if ncomp == 1:
                continue
            keep = np.argmax(np.bincount(comp))
            for c in range(ncomp):
                if c == keep:
                    continue
                stray = nodes[comp == c]
                mask = np.zeros(labels.size, dtype=bool)
                mask[stray] = True
                sel = mask[coo.row] & ~mask[coo.col]
                nbr_labels = labels[coo.col[sel]]
                nbr_labels = nbr_labels[nbr_labels != i]
                if nbr_labels.size == 0:
                    continue
                labels[stray] = np.bincount(nbr_labels).argmax()
                changed = True
        if not changed:
            break
    return labels


def _recentre(points: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """Per class, the member node closest to the class centroid."""
    seeds = np.empty(n, dtype=np.int64)
    for i in range(n):
        members = np.flatnonzero(labels == i)
        c = points[members].mean(axis=0)
        seeds[i] = members[np.argmin(((points[members] - c) ** 2).sum(axis=1))]
    return seeds


def partition_nodes(mesh: Mesh, n: int, seed: int = 0, adjacency=None, lloyd_iterations: int = 8) -> np.ndarray:
    """Label every mesh node with a subdomain id in ``range(n)``.

    Seeds are spread by farthest-point traversal of the node graph, classes are
    grown by balanced breadth-first search, re-seeded at class centroids a few
    times (graph k-means) and finally made connected.
    """
    if n < 1:
        raise DecompositionError("number of subdomains must be >= 1")
    if n > mesh.n_free:
        raise DecompositionError(f"cannot split {mesh.n_free} free DOFs into {n} subdomains")
    if n == 1:
        return np.zeros(mesh.n_vertices, dtype=np.int64)
    adj = node_adjacency(mesh) if adjacency is None else adjacency
    adj = adj.astype(np.float64)
    rng = np.random.default_rng(seed)
    seeds = _farthest_point_seeds(adj, n, rng)
    labels = _grow(adj, seeds)
    for _ in range(lloyd_iterations):
        seeds = _recentre(mesh.vertices, labels, n)
        labels = _grow(adj, seeds)
    labels = _repair(adj, labels, n)
    if np.unique(labels).size != n:
        raise DecompositionError("partitioning produced an empty class")
    return labels


def build_overlap(mesh: Mesh, labels) -> Decomposition:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (mesh.n_vertices,):
        raise DecompositionError("need exactly one label per node")
    if labels.min(initial=0) < 0:
        raise DecompositionError("labels must be non-negative")
    n = int(labels.max()) + 1
    el_labels = np.sort(labels[mesh.elements], axis=1)
    distinct = 1 + (np.diff(el_labels, axis=1) != 0).sum(axis=1)
    ne, k = el_labels.shape
    pairs = np.unique(
        np.stack([np.repeat(np.arange(ne), k), el_labels.ravel()], axis=1), axis=0
    )
    order = np.argsort(pairs[:, 1], kind="stable")
    pairs = pairs[order]
    bounds = np.searchsorted(pairs[:, 1], np.arange(n + 1))
    subdomain_elements = [pairs[bounds[i]: bounds[i + 1], 0] for i in range(n)]
    empty = [i for i, s in enumerate(subdomain_elements) if s.size == 0]
    if empty:
        raise DecompositionError(f"label class(es) {empty} contain no elements")

    interface = np.flatnonzero(distinct >= 2)
    nb = set()
    for row in el_labels[interface]:
        u = np.unique(row)
        for a in range(len(u)):
            for b in range(a + 1, len(u)):
                nb.add((int(u[a]), int(u[b])))

    free = np.ones(mesh.n_vertices, dtype=bool)
    free[mesh.dirichlet_nodes] = False
    owned = [np.flatnonzero((labels == i) & free) for i in range(n)]
    return Decomposition(
        labels=labels,
        subdomain_elements=subdomain_elements,
        owned_dofs=owned,
        interface_elements=interface,
        neighbor_pairs=sorted(nb),
    )


def hop_ball(adj: sparse.csr_matrix, start_nodes, r_hops: int) -> np.ndarray:
    """Boolean mask of nodes within ``r_hops`` edges of ``start_nodes``."""
    mask = np.zeros(adj.shape[0], dtype=bool)
    mask[start_nodes] = True
    for _ in range(r_hops):
        grown = mask | (adj @ mask.astype(np.float64) > 0)
        if (grown == mask).all():
            break
        mask = grown
    return mask


def extend_subdomain(mesh: Mesh, subdomain_elements, r_hops: int, adjacency=None) -> Extension:
    """Elements whose nodes all lie within ``r_hops`` of omega_i, with the I/B split of its free DOFs."""
    if r_hops < 1:
        raise DecompositionError("r_hops must be >= 1")
    adj = node_adjacency(mesh) if adjacency is None else adjacency
    adj = adj.astype(np.float64) if adj.dtype != np.float64 else adj
    nodes = mesh.submesh_nodes(subdomain_elements)
    ball = hop_ball(adj, nodes, r_hops)
    in_ext = ball[mesh.elements].all(axis=1)
    ext_elements = np.flatnonzero(in_ext)

    ext_nodes = np.zeros(mesh.n_vertices, dtype=bool)
    ext_nodes[mesh.elements[in_ext].ravel()] = True
    touched_outside = np.zeros(mesh.n_vertices, dtype=bool)
    touched_outside[mesh.elements[~in_ext].ravel()] = True
    free = np.ones(mesh.n_vertices, dtype=bool)
    free[mesh.dirichlet_nodes] = False
    boundary = np.flatnonzero(ext_nodes & free & touched_outside)
    interior = np.flatnonzero(ext_nodes & free & ~touched_outside)
    return Extension(ext_elements, interior, boundary)


def decompose(mesh: Mesh, n: int, r_hops: int, seed: int = 0, labels=None) -> Decomposition:
    adj = node_adjacency(mesh).astype(np.float64)
    if labels is None:
        labels = partition_nodes(mesh, n, seed=seed, adjacency=adj)
    dec = build_overlap(mesh, labels)
    dec.r_hops = r_hops
    dec.extensions = [extend_subdomain(mesh, s, r_hops, adjacency=adj) for s in dec.subdomain_elements]
    return dec


def stitch(n_nodes: int, owned_dofs: list, local_values: list) -> np.ndarray:
    """Sum of zero-extended subdomain functions, each keeping only its owned nodes.

    ``local_values[i]`` is indexed like ``owned_dofs[i]``.
    """
    out = np.zeros(n_nodes)
    for dofs, vals in zip(owned_dofs, local_values):
        out[dofs] = vals
    return out


def write_partition(path, labels) -> None:
    Path(path).write_text("".join(f"{int(x)}\n" for x in labels))


def read_partition(path) -> np.ndarray:
    vals = []
    for no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            vals.append(int(line))
        except ValueError:
            raise DecompositionError(f"{path}:{no}: expected one integer label per line") from None
    return np.asarray(vals, dtype=np.int64)


@dataclass
class Submesh:
    """Everything a worker needs about one extended subdomain, in local numbering."""

    subdomain: int
    global_nodes: np.ndarray  # local node k is global node global_nodes[k]
    vertices: np.ndarray
    elements: np.ndarray  # elements of omega_i^+
    in_omega: np.ndarray  # bool per local element: belongs to omega_i
    owned: np.ndarray  # local ids of owned free nodes, ascending global order
    interior: np.ndarray  # I, local ids
    boundary: np.ndarray  # B, local ids, fixed order
    dirichlet: np.ndarray  # local ids of global Dirichlet nodes
    interface_rows: np.ndarray  # positions into ``owned`` of nodes touching omega_0
    neighbors: np.ndarray

    def local_mesh(self) -> Mesh:
        return Mesh(self.vertices, self.elements, self.dirichlet)

    @property
    def omega_elements(self) -> np.ndarray:
        return np.flatnonzero(self.in_omega)


def interface_dofs(mesh: Mesh, dec: Decomposition) -> np.ndarray:
    """Free nodes of the elements shared by two or more subdomains."""
    nodes = mesh.submesh_nodes(dec.interface_elements) if dec.interface_elements.size else np.empty(0, np.int64)
    return np.setdiff1d(nodes, mesh.dirichlet_nodes)


def extract_submesh(mesh: Mesh, dec: Decomposition, i: int, iface=None) -> Submesh:
    ext = dec.extensions[i]
    g_nodes = mesh.submesh_nodes(ext.elements)
    lookup = np.full(mesh.n_vertices, -1, dtype=np.int64)
    lookup[g_nodes] = np.arange(g_nodes.size)
    in_omega = np.isin(ext.elements, dec.subdomain_elements[i], assume_unique=True)
    if iface is None:
        iface = interface_dofs(mesh, dec)
    owned = dec.owned_dofs[i]
    return Submesh(
        subdomain=i,
        global_nodes=g_nodes,
        vertices=mesh.vertices[g_nodes],
        elements=lookup[mesh.elements[ext.elements]],
        in_omega=in_omega,
        owned=lookup[owned],
        interior=lookup[ext.interior],
        boundary=lookup[ext.boundary],
        dirichlet=lookup[np.intersect1d(g_nodes, mesh.dirichlet_nodes, assume_unique=True)],
        interface_rows=np.flatnonzero(np.isin(owned, iface, assume_unique=True)),
        neighbors=np.asarray(dec.neighbors(i), dtype=np.int64),
    )
