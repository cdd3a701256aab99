"""Implicit assembly of the reduced system Q^T A Q.

Neither the global stiffness matrix nor the global basis is built.  Diagonal
blocks come from the workers; an off-diagonal block (i, j) only involves the
interface stiffness A_0, assembled over the elements shared by two or more
subdomains, and the basis rows at owned nodes touching those elements.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .assembly import assemble_stiffness
from .mesh import Mesh


class ProjectionError(RuntimeError):
    pass


@dataclass
class InterfaceMatrix:
    dofs: np.ndarray  # global node ids, ascending
    matrix: sparse.csr_matrix

    def rows_of(self, nodes: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.dofs, nodes)
        if nodes.size and (pos.max() >= self.dofs.size or not np.array_equal(self.dofs[pos], nodes)):
            raise ProjectionError("basis interface rows do not match the interface DOFs of the decomposition")
        return pos


@dataclass
class ReducedSystem:
    offsets: np.ndarray  # block i occupies offsets[i]:offsets[i+1]
    matrix: sparse.csr_matrix
    rhs: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def block(self, i: int, j: int) -> np.ndarray:
        o = self.offsets
        return self.matrix[o[i]: o[i + 1], o[j]: o[j + 1]].toarray()


def assemble_interface(mesh: Mesh, interface_elements, coefficient=None) -> InterfaceMatrix:
    """Stiffness over omega_0, indexed on the free nodes of those elements."""
    interface_elements = np.asarray(interface_elements, dtype=np.int64)
    if interface_elements.size == 0:
        return InterfaceMatrix(np.empty(0, dtype=np.int64), sparse.csr_matrix((0, 0)))
    nodes = np.unique(mesh.elements[interface_elements])
    dofs = np.setdiff1d(nodes, mesh.dirichlet_nodes)
    A0 = assemble_stiffness(mesh, dofs, elements=interface_elements, coefficient=coefficient)
    return InterfaceMatrix(dofs, A0)


def offdiagonal_block(A0: InterfaceMatrix, basis_i, basis_j) -> np.ndarray:
    """Q_i^T A_ij Q_j from the interface rows of both bases."""
    ri = A0.rows_of(basis_i.interface_nodes)
    rj = A0.rows_of(basis_j.interface_nodes)
    A_ij = A0.matrix[ri][:, rj]
    return basis_i.Q_interface.T @ (A_ij @ basis_j.Q_interface)


def assemble_reduced(bases: list, A0: InterfaceMatrix, neighbor_pairs, workers: int = 1) -> ReducedSystem:
    """Block-sparse reduced matrix and right-hand side."""
    missing = [i for i, b in enumerate(bases) if b is None]
    if missing:
        raise ProjectionError(f"missing bases for subdomains {missing}")
    for i, b in enumerate(bases):
        if b.subdomain != i:
            raise ProjectionError(f"basis at position {i} belongs to subdomain {b.subdomain}")
    sizes = np.array([b.size for b in bases], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pairs = sorted(tuple(p) for p in neighbor_pairs)

    def task(pair):
        i, j = pair
        return offdiagonal_block(A0, bases[i], bases[j])

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(task, pairs))
    else:
        blocks = [task(p) for p in pairs]

    rows, cols, vals = [], [], []
    for b, o in zip(bases, offsets[:-1]):
        idx = o + np.arange(b.size)
        if b.block is None:
            rows.append(idx)
            cols.append(idx)
            vals.append(b.block_diagonal)
        else:
            r, c = np.meshgrid(idx, idx, indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(b.block.ravel())
    for (i, j), blk in zip(pairs, blocks):
        if blk.size == 0:
            continue
        r, c = np.meshgrid(offsets[i] + np.arange(blk.shape[0]), offsets[j] + np.arange(blk.shape[1]), indexing="ij")
        rows += [r.ravel(), c.ravel()]
        cols += [c.ravel(), r.ravel()]
        vals += [blk.ravel(), blk.ravel()]
    n = int(offsets[-1])
    if rows:
        mat = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
    else:
        mat = sparse.csr_matrix((n, n))
    rhs = np.concatenate([b.rhs for b in bases]) if bases else np.zeros(0)
    return ReducedSystem(offsets, mat, rhs)
