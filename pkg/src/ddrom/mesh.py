"""Simplicial meshes of the unit square/cube, a plain-text mesh format and node adjacency."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""


class MeshValidationError(ValueError):
    """Raised when mesh data violates a structural invariant."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle (d=2) or tetrahedron (d=3) mesh.

    ``vertices`` has shape (n_vertices, d), ``elements`` has shape
    (n_elements, d+1) and ``dirichlet_nodes`` is a sorted array of vertex
    indices carrying the homogeneous Dirichlet condition.
    """

    vertices: np.ndarray
    elements: np.ndarray
    dirichlet_nodes: np.ndarray

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        dirichlet = np.unique(np.asarray(self.dirichlet_nodes, dtype=np.int64))
        for arr in (vertices, elements, dirichlet):
            arr.flags.writeable = False
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "dirichlet_nodes", dirichlet)
        self.validate()

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def free_nodes(self) -> np.ndarray:
        """Vertices not carrying a Dirichlet condition, ascending."""
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.dirichlet_nodes] = False
        return np.flatnonzero(mask)

    @property
    def n_free(self) -> int:
        return self.n_vertices - self.dirichlet_nodes.size

    def validate(self) -> None:
        d = self.vertices.shape[1] if self.vertices.ndim == 2 else -1
        if d not in (2, 3):
            raise MeshValidationError(f"vertices must have 2 or 3 columns, got shape {self.vertices.shape}")
        if self.elements.ndim != 2 or self.elements.shape[1] != d + 1:
            raise MeshValidationError(f"elements must have {d + 1} columns, got shape {self.elements.shape}")
        nv = self.vertices.shape[0]
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= nv):
            bad = int(np.flatnonzero((self.elements < 0).any(1) | (self.elements >= nv).any(1))[0])
            raise MeshValidationError(f"element {bad} references a vertex index outside [0, {nv})")
        if self.dirichlet_nodes.size and (self.dirichlet_nodes[0] < 0 or self.dirichlet_nodes[-1] >= nv):
            raise MeshValidationError("dirichlet node index outside the vertex range")
        vol = signed_volumes(self.vertices, self.elements)
        tol = 1e-14 * max(1.0, float(np.abs(vol).max(initial=0.0)))
        degenerate = np.flatnonzero(np.abs(vol) <= tol)
        if degenerate.size:
            raise MeshValidationError(f"element {int(degenerate[0])} is degenerate (zero volume)")

    def volumes(self) -> np.ndarray:
        return np.abs(signed_volumes(self.vertices, self.elements))

    def diameter(self) -> float:
        """Maximum element diameter h (longest edge)."""
        h = 0.0
        for a, b in itertools.combinations(range(self.dim + 1), 2):
            e = self.vertices[self.elements[:, b]] - self.vertices[self.elements[:, a]]
            h = max(h, float(np.sqrt((e * e).sum(1)).max(initial=0.0)))
        return h

    def submesh_nodes(self, element_ids) -> np.ndarray:
        return np.unique(self.elements[np.asarray(element_ids, dtype=np.int64)])


def signed_volumes(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    d = vertices.shape[1]
    p = vertices[elements]
    jac = p[:, 1:, :] - p[:, :1, :]
    return np.linalg.det(jac) / math.factorial(d)


def _orient(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    elements = elements.copy()
    flip = signed_volumes(vertices, elements) < 0
    elements[flip, 0], elements[flip, 1] = elements[flip, 1], elements[flip, 0].copy()
    return elements


def generate_unit_cube_mesh(divisions_per_axis: int, dimension: int = 3) -> Mesh:
    """Structured mesh of [0,1]^d.

    Every lattice cell is split along its main diagonal: 2 triangles in 2D,
    6 Kuhn (Freudenthal) tetrahedra in 3D.  All boundary vertices are
    Dirichlet nodes.
    """
    n = int(divisions_per_axis)
    if n < 1:
        raise ValueError("divisions_per_axis must be >= 1")
    if dimension not in (2, 3):
        raise ValueError("dimension must be 2 or 3")
    d = dimension
    ticks = np.linspace(0.0, 1.0, n + 1)
    grids = np.meshgrid(*([ticks] * d), indexing="ij")
    # vertex (i, j, k) -> i + (n+1) j + (n+1)^2 k
    vertices = np.stack([g.ravel(order="F") for g in grids], axis=1)
    strides = (n + 1) ** np.arange(d)
    corners = np.stack(
        np.meshgrid(*([np.arange(n)] * d), indexing="ij"), axis=-1
    ).reshape(-1, d)
    base = corners @ strides

    simplices = []
    for perm in itertools.permutations(range(d)):
        offsets = [0]
        for axis in perm:
            offsets.append(offsets[-1] + strides[axis])
        simplices.append(base[:, None] + np.asarray(offsets)[None, :])
    elements = np.concatenate(simplices, axis=0)
    elements = _orient(vertices, elements)

    idx = np.rint(vertices * n).astype(np.int64)
    on_boundary = ((idx == 0) | (idx == n)).any(axis=1)
    return Mesh(vertices, elements, np.flatnonzero(on_boundary))


def boundary_nodes(mesh: Mesh) -> np.ndarray:
    """Vertices lying on facets that belong to a single element."""
    d = mesh.dim
    facets = np.concatenate(
        [np.delete(mesh.elements, k, axis=1) for k in range(d + 1)], axis=0
    )
    facets = np.sort(facets, axis=1)
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])


def node_adjacency(mesh: Mesh) -> sparse.csr_matrix:
    """Boolean node graph: i ~ j iff i != j and they share an element."""
    e = mesh.elements
    k = e.shape[1]
    rows = np.repeat(e, k, axis=1).ravel()
    cols = np.tile(e, (1, k)).ravel()
    keep = rows != cols
    nv = mesh.n_vertices
    g = sparse.coo_matrix(
        (np.ones(keep.sum(), dtype=bool), (rows[keep], cols[keep])), shape=(nv, nv)
    ).tocsr()
    g.sum_duplicates()
    g.data[:] = True
    return g


def export_mesh(mesh: Mesh, path) -> None:
    d = mesh.dim
    lines = [f"mesh {d} {mesh.n_vertices} {mesh.n_elements}"]
    lines.extend(" ".join(repr(float(x)) for x in v) for v in mesh.vertices)
    lines.extend(" ".join(str(int(i)) for i in el) for el in mesh.elements)
    lines.append(f"dirichlet {mesh.dirichlet_nodes.size}")
    lines.extend(str(int(i)) for i in mesh.dirichlet_nodes)
    Path(path).write_text("\n".join(lines) + "\n")


def import_mesh(path) -> Mesh:
    text = Path(path).read_text().splitlines()
    records = [(no + 1, ln.split()) for no, ln in enumerate(text) if ln.strip()]
    it = iter(records)

    def take(expected: str):
        try:
            return next(it)
        except StopIteration:
            raise MeshFormatError(f"{path}: unexpected end of file while reading {expected}") from None

    lineno, head = take("header")
    if len(head) != 4 or head[0] != "mesh":
        raise MeshFormatError(f"{path}:{lineno}: expected 'mesh <d> <n_vertices> <n_elements>'")
    try:
        d, nv, ne = (int(x) for x in head[1:])
    except ValueError:
        raise MeshFormatError(f"{path}:{lineno}: non-integer header field") from None
    if d not in (2, 3) or nv < 0 or ne < 0:
        raise MeshFormatError(f"{path}:{lineno}: invalid header values")

    vertices = np.empty((nv, d))
    for i in range(nv):
        lineno, rec = take(f"vertex {i}")
        if len(rec) != d:
            raise MeshFormatError(f"{path}:{lineno}: vertex {i} needs {d} coordinates, got {len(rec)}")
        try:
            vertices[i] = [float(x) for x in rec]
        except ValueError:
            raise MeshFormatError(f"{path}:{lineno}: vertex {i} has a non-numeric coordinate") from None

    elements = np.empty((ne, d + 1), dtype=np.int64)
    for i in range(ne):
        lineno, rec = take(f"element {i}")
        if len(rec) != d + 1:
            raise MeshFormatError(f"{path}:{lineno}: element {i} needs {d + 1} indices, got {len(rec)}")
        try:
            elements[i] = [int(x) for x in rec]
        except ValueError:
            raise MeshFormatError(f"{path}:{lineno}: element {i} has a non-integer index") from None

    lineno, rec = take("dirichlet record")
    if len(rec) != 2 or rec[0] != "dirichlet":
        raise MeshFormatError(f"{path}:{lineno}: expected 'dirichlet <count>'")
    try:
        count = int(rec[1])
    except ValueError:
        raise MeshFormatError(f"{path}:{lineno}: non-integer dirichlet count") from None
    dirichlet = np.empty(count, dtype=np.int64)
    for i in range(count):
        lineno, rec = take(f"dirichlet index {i}")
        if len(rec) != 1:
            raise MeshFormatError(f"{path}:{lineno}: expected a single dirichlet index")
        try:
            dirichlet[i] = int(rec[0])
        except ValueError:
            raise MeshFormatError(f"{path}:{lineno}: non-integer dirichlet index") from None
    extra = next(it, None)
    if extra is not None:
        raise MeshFormatError(f"{path}:{extra[0]}: trailing data after dirichlet list")
    return Mesh(vertices, elements, dirichlet)
