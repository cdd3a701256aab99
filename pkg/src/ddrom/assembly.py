"""P1 finite element matrices, load vectors and a reference full-order solver.

All assemblers take the global mesh, an optional subset of element ids (a
submesh) and the retained DOFs, given as mesh node ids.  Row/column ``k`` of
the result corresponds to node ``dofs[k]``; contributions to nodes outside
``dofs`` are dropped, which is how homogeneous Dirichlet conditions are
imposed.
"""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .mesh import Mesh

Coefficient = Optional[Callable[[np.ndarray], np.ndarray]]


class AssemblyError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


# Degree-2 exact simplex rules in barycentric coordinates (weights sum to 1).
_A3 = 0.5854101966249685
_B3 = 0.1381966011250105
QUADRATURE = {
    2: (np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]), np.full(3, 1.0 / 3.0)),
    3: (
        np.array(
            [
                [_A3, _B3, _B3, _B3],
                [_B3, _A3, _B3, _B3],
                [_B3, _B3, _A3, _B3],
                [_B3, _B3, _B3, _A3],
            ]
        ),
        np.full(4, 0.25),
    ),
}


def coefficient_field(k: int) -> Callable[[np.ndarray], np.ndarray]:
    """Oscillating material a(x) = 10^k sin(100 x) + 10^k + 1 (x = first coordinate)."""
    scale = 10.0**k

    def a(points):
        return scale * np.sin(100.0 * points[:, 0]) + scale + 1.0

    a.__name__ = f"oscillating_k{k}"
    return a


def unit_energy_load(points: np.ndarray) -> np.ndarray:
    """Load whose exact solution 30 x(1-x) y(1-y) z(1-z) has unit energy norm on [0,1]^3."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return 60.0 * ((1 - x) * x * (1 - y) * y + (1 - x) * x * (1 - z) * z + (1 - y) * y * (1 - z) * z)


def unit_energy_solution(points: np.ndarray) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return 30.0 * x * (1 - x) * y * (1 - y) * z * (1 - z)


def _constant(value: float):
    def f(points):
        return np.full(len(points), value)

    return f


def resolve_load(name: Optional[str]) -> Callable[[np.ndarray], np.ndarray]:
    """Named right-hand sides: ``unit_energy`` (default), ``one``, ``zero``."""
    name = name or "unit_energy"
    if name == "unit_energy":
        return unit_energy_load
    if name == "one":
        return _constant(1.0)
    if name == "zero":
        return _constant(0.0)
    raise ValueError(f"unknown load {name!r}; expected unit_energy, one or zero")


def resolve_coefficient(name: Optional[str]) -> Coefficient:
    """Named coefficients: ``one`` (default, returns None) or ``osc:<k>``."""
    if name in (None, "", "one"):
        return None
    if name.startswith("osc:"):
        try:
            k = int(name[4:])
        except ValueError:
            raise ValueError(f"bad coefficient {name!r}; expected osc:<integer>") from None
        return coefficient_field(k)
    raise ValueError(f"unknown coefficient {name!r}; expected one or osc:<k>")


def _element_geometry(mesh: Mesh, elements: np.ndarray):
    """Barycentric gradients (ne, d+1, d) and volumes (ne,)."""
    d = mesh.dim
    p = mesh.vertices[mesh.elements[elements]]
    jac = np.transpose(p[:, 1:, :] - p[:, :1, :], (0, 2, 1))  # columns p_k - p_0
    det = np.linalg.det(jac)
    bad = np.flatnonzero(np.abs(det) <= 1e-300)
    if bad.size:
        raise AssemblyError(f"element {int(elements[bad[0]])} is degenerate (zero volume)")
    inv = np.linalg.inv(jac)  # rows are grad(lambda_1..lambda_d)
    grads = np.empty((len(elements), d + 1, d))
    grads[:, 1:, :] = inv
    grads[:, 0, :] = -inv.sum(axis=1)
    return grads, np.abs(det) / math.factorial(d)


def _select(mesh: Mesh, elements) -> np.ndarray:
    if elements is None:
        return np.arange(mesh.n_elements)
    return np.asarray(elements, dtype=np.int64)


def _scatter(mesh, elements, local, dofs):
    """Sum element matrices into a CSR matrix over ``dofs``."""
    n = len(dofs)
    lookup = np.full(mesh.n_vertices, -1, dtype=np.int64)
    lookup[np.asarray(dofs, dtype=np.int64)] = np.arange(n)
    loc = lookup[mesh.elements[elements]]
    k = loc.shape[1]
    rows = np.repeat(loc, k, axis=1).ravel()
    cols = np.tile(loc, (1, k)).ravel()
    vals = local.ravel()
    keep = (rows >= 0) & (cols >= 0)
    mat = sparse.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return mat


def element_stiffness(mesh: Mesh, elements=None, coefficient: Coefficient = None):
    elements = _select(mesh, elements)
    grads, vol = _element_geometry(mesh, elements)
    weight = vol
    if coefficient is not None:
        centroids = mesh.vertices[mesh.elements[elements]].mean(axis=1)
        weight = vol * np.asarray(coefficient(centroids), dtype=float)
    return np.einsum("eid,ejd,e->eij", grads, grads, weight)


def element_mass(mesh: Mesh, elements=None):
    elements = _select(mesh, elements)
    d = mesh.dim
    _, vol = _element_geometry(mesh, elements)
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    return vol[:, None, None] * ref[None]


def assemble_stiffness(mesh: Mesh, dofs, elements=None, coefficient: Coefficient = None) -> sparse.csr_matrix:
    """Entries int a grad(phi_i) . grad(phi_j) with a sampled at element centroids."""
    elements = _select(mesh, elements)
    return _scatter(mesh, elements, element_stiffness(mesh, elements, coefficient), dofs)


def assemble_mass(mesh: Mesh, dofs, elements=None) -> sparse.csr_matrix:
    elements = _select(mesh, elements)
    return _scatter(mesh, elements, element_mass(mesh, elements), dofs)


def assemble_h1_matrix(mesh: Mesh, dofs, elements=None) -> sparse.csr_matrix:
    """Gram matrix of the H1 inner product (unit coefficient stiffness + mass)."""
    elements = _select(mesh, elements)
    local = element_stiffness(mesh, elements) + element_mass(mesh, elements)
    return _scatter(mesh, elements, local, dofs)


def assemble_load(mesh: Mesh, f: Callable[[np.ndarray], np.ndarray], dofs, elements=None) -> np.ndarray:
    """Entries int f phi_i dx by a degree-2 exact rule on each element."""
    elements = _select(mesh, elements)
    n = len(dofs)
    if len(elements) == 0:
        return np.zeros(n)
    bary, w = QUADRATURE[mesh.dim]
    p = mesh.vertices[mesh.elements[elements]]  # (ne, d+1, d)
    _, vol = _element_geometry(mesh, elements)
    points = np.einsum("qk,ekd->eqd", bary, p)
    fq = np.asarray(f(points.reshape(-1, mesh.dim)), dtype=float).reshape(len(elements), len(w))
    local = vol[:, None] * np.einsum("eq,q,qk->ek", fq, w, bary)
    lookup = np.full(mesh.n_vertices, -1, dtype=np.int64)
    lookup[np.asarray(dofs, dtype=np.int64)] = np.arange(n)
    loc = lookup[mesh.elements[elements]].ravel()
    vals = local.ravel()
    keep = loc >= 0
    return np.bincount(loc[keep], weights=vals[keep], minlength=n)


def solve_full(A, b, tol: float = 1e-10, maxiter: Optional[int] = None) -> np.ndarray:
    """Jacobi-preconditioned CG for the full-order SPD system."""
    A = sparse.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if A.shape[0] == 1:
        return b / A[0, 0]
    diag = A.diagonal()
    precond = spla.LinearOperator(A.shape, matvec=lambda r: r / diag, dtype=float)
    if maxiter is None:
        maxiter = max(1000, 10 * A.shape[0])
    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=precond)
    residual = np.linalg.norm(A @ x - b) / bnorm
    if info != 0 or residual > 10 * tol:
        raise SolverError(f"CG did not converge: relative residual {residual:.3e} after {maxiter} iterations", residual)
    return x
