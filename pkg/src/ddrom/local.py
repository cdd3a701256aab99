"""Optimal local reduced bases on one extended subdomain.

The lifting operator maps Dirichlet data on the artificial boundary B of the
extended subdomain to the discrete harmonic extension restricted to the
subdomain.  Its truncated SVD is taken in the weighted norm

    W = R_i Z R_BB^{-1}

where R_i is the Cholesky factor of the H1 Gram matrix on the subdomain and
R_BB the trailing block of the Cholesky factor of the H1 Gram matrix on the
extended subdomain (I unknowns eliminated first).  Spectral norms of W then
coincide with H1 operator norms.  No inverse is ever formed; every R^{-1} is
a triangular solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy import sparse
from scipy.sparse import linalg as spla

from .assembly import assemble_h1_matrix, assemble_load, assemble_stiffness
from .decomposition import Submesh

log = logging.getLogger(__name__)

DEFAULT_EXPLICIT_CAP = 20000
RANK_TOL = 1e-12  # relative eigenvalue floor of the projected block


class WorkerError(RuntimeError):
    """Fatal error while reducing one subdomain."""


class SPDFactor:
    """Sparse LDL^T of an SPD matrix via SuperLU with symmetric ordering and no pivoting.

    With ``order`` the fill-reducing permutation, A[order][:, order] = L D L^T,
    so R = D^{1/2} L^T is the Cholesky factor of the reordered matrix.
    """

    def __init__(self, A):
        A = sparse.csc_matrix(A)
        self.n = A.shape[0]
        if self.n == 0:
            self.lu = None
            self.order = np.empty(0, dtype=np.int64)
            self.d = np.empty(0)
            return
        try:
            self.lu = spla.splu(
                A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True}
            )
        except RuntimeError as exc:
            raise WorkerError(f"sparse factorization failed: {exc}") from exc
        if not np.array_equal(self.lu.perm_r, self.lu.perm_c):
            raise WorkerError("factorization pivoted off the diagonal; matrix is not SPD")
        self.d = self.lu.U.diagonal()
        if not (self.d > 0).all():
            raise WorkerError("non-positive pivot: matrix is not positive definite")
        self.order = np.argsort(self.lu.perm_c)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if self.n == 0:
            return b.copy()
        return self.lu.solve(np.asfortranarray(b))

    def half_solve(self, b: np.ndarray) -> np.ndarray:
        """R^{-T} b[order]: one forward substitution."""
        b = np.asarray(b, dtype=np.float64)
        if self.n == 0:
            return b.copy()
        L = self.lu.L.tocsr()
        y = spla.spsolve_triangular(L, b[self.order], lower=True, unit_diagonal=True)
        y = np.asarray(y).reshape(b.shape)
        return y / np.sqrt(self.d).reshape((-1,) + (1,) * (b.ndim - 1))


def trailing_cholesky_block(H, n_first: int):
    """R_BB of the upper Cholesky factor of H, unknowns ``:n_first`` eliminated first.

    Block form of the factorization: R_II from a sparse factor of H_II,
    R_IB = R_II^{-T} H_IB, then R_BB = chol(H_BB - R_IB^T R_IB).  The
    ordering inside the first block is free; the trailing block keeps its
    given order.  Returns (R_BB, factor of H_II).
    """
    H = sparse.csc_matrix(H)
    N = n_first
    fact = SPDFactor(H[:N, :N])
    H_BB = H[N:, N:].toarray()
    if H_BB.shape[0] == 0:
        return np.zeros((0, 0)), fact
    R_IB = fact.half_solve(H[:N, N:].toarray())
    S = H_BB - R_IB.T @ R_IB
    try:
        R_BB = sla.cholesky(S, lower=False)
    except np.linalg.LinAlgError as exc:
        raise WorkerError("Cholesky breakdown in the boundary block") from exc
    return R_BB, fact


@dataclass
class LocalBasis:
    """Reduced basis of one subdomain with everything the master needs."""

    subdomain: int
    owned_nodes: np.ndarray  # global node ids of the basis rows
    Q: np.ndarray  # (len(owned_nodes), m)
    block_diagonal: np.ndarray  # diagonal of Q^T A_ii Q
    rhs: np.ndarray  # Q^T b_i
    interface_rows: np.ndarray  # positions into owned_nodes touching omega_0
    singular_values: np.ndarray  # all computed (explicit) or projected (randomized)
    n_kept: int  # lifting modes kept, excluding the particular solution
    has_particular: bool
    method: str
    n_interior: int = 0
    n_boundary: int = 0
    sketch_size: int = 0
    diagnostics: dict = field(default_factory=dict)
    block: Optional[np.ndarray] = None  # full Q^T A_ii Q, only when not diagonalized

    @property
    def size(self) -> int:
        return self.Q.shape[1]

    @property
    def interface_nodes(self) -> np.ndarray:
        return self.owned_nodes[self.interface_rows]

    @property
    def Q_interface(self) -> np.ndarray:
        return self.Q[self.interface_rows]


def sketch_size(M: int, divisor: int = 8) -> int:
    """floor(M/divisor) with a floor of min(M, 32) columns for small boundaries."""
    if M == 0:
        return 0
    return int(min(M, max(M // divisor, min(M, 32))))


class LocalProblem:
    """Assembled and factorized operators of one extended subdomain."""

    def __init__(self, sub: Submesh, coefficient=None, load: Optional[Callable] = None):
        self.sub = sub
        mesh = sub.local_mesh()
        self.mesh = mesh
        I, B = sub.interior, sub.boundary
        self.N, self.M = len(I), len(B)
        dofs = np.concatenate([I, B])
        omega = sub.omega_elements

        A = assemble_stiffness(mesh, dofs, coefficient=coefficient).tocsc()
        self.A_II = A[: self.N, : self.N]
        self.A_IB = A[: self.N, self.N:].tocsr()
        H = assemble_h1_matrix(mesh, dofs)
        self.R_BB, self.H_II_factor = trailing_cholesky_block(H, self.N)
        self.H_ext = H

        free = np.ones(mesh.n_vertices, dtype=bool)
        free[sub.dirichlet] = False
        self.local_dofs = np.flatnonzero(np.isin(np.arange(mesh.n_vertices), mesh.elements[omega]) & free)
        pos_in_I = np.full(mesh.n_vertices, -1, dtype=np.int64)
        pos_in_I[I] = np.arange(self.N)
        self.C = pos_in_I[self.local_dofs]
        if (self.C < 0).any():
            raise WorkerError("subdomain node lies on the boundary of its extension; extension too small")
        pos_local = np.full(mesh.n_vertices, -1, dtype=np.int64)
        pos_local[self.local_dofs] = np.arange(self.local_dofs.size)
        self.D = pos_local[sub.owned]
        if (self.D < 0).any():
            raise WorkerError("owned node outside its subdomain")

        H_i = assemble_h1_matrix(mesh, self.local_dofs, elements=omega).toarray()
        try:
            self.R_i = sla.cholesky(H_i, lower=False)
        except np.linalg.LinAlgError as exc:
            raise WorkerError("Cholesky breakdown for the subdomain H1 matrix") from exc
        self.A_owned = assemble_stiffness(mesh, sub.owned, elements=omega, coefficient=coefficient)
        self.stiff = SPDFactor(self.A_II)
        self.coefficient = coefficient
        self.load = load

    @property
    def n_local(self) -> int:
        return self.local_dofs.size

    # -- operators ---------------------------------------------------------

    def lift(self, beta: np.ndarray) -> np.ndarray:
        """Harmonic extension of boundary data beta, restricted to the subdomain DOFs."""
        x = self.stiff.solve(-(self.A_IB @ beta))
        return x[self.C]

    def weighted_apply(self, X: np.ndarray) -> np.ndarray:
        """W X = R_i Z R_BB^{-1} X."""
        t = sla.solve_triangular(self.R_BB, X, lower=False)
        return self.R_i @ self.lift(t)

    def weighted_apply_transpose(self, Y: np.ndarray) -> np.ndarray:
        """W^T Y, using len(Y.T) solves with A_II^T rather than M."""
        g = np.zeros((self.N,) + Y.shape[1:])
        g[self.C] = self.R_i.T @ Y
        h = self.stiff.solve(g)  # A_II symmetric
        p = -(self.A_IB.T @ h)
        return sla.solve_triangular(self.R_BB, p, lower=False, trans="T")

    def weighted_matrix(self) -> np.ndarray:
        """Dense W with min(n_local, M) sparse solves."""
        if self.M == 0:
            return np.zeros((self.n_local, 0))
        if self.M <= self.n_local:
            return self.weighted_apply(np.eye(self.M))
        return self.weighted_apply_transpose(np.eye(self.n_local)).T

    def particular_solution(self) -> np.ndarray:
        """Solution with zero data on B, on the subdomain DOFs."""
        if self.load is None:
            return np.zeros(self.n_local)
        b_I = assemble_load(self.mesh, self.load, self.sub.interior)
        return self.stiff.solve(b_I)[self.C]

    def spectrum(self, max_count: Optional[int] = None) -> np.ndarray:
        if self.M == 0:
            return np.zeros(0)
        s = sla.svd(self.weighted_matrix(), compute_uv=False)
        return s if max_count is None else s[:max_count]

    # -- truncated weighted SVDs ------------------------------------------

    def reduce_explicit(self, epsilon: float, max_boundary: int = DEFAULT_EXPLICIT_CAP):
        """Left singular vectors of W above epsilon, and all singular values."""
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.M > max_boundary:
            raise WorkerError(
                f"{self.M} boundary DOFs exceed the explicit SVD cap {max_boundary}; use the randomized method"
            )
        if self.M == 0:
            return np.zeros((self.n_local, 0)), np.zeros(0)
        U, s, _ = sla.svd(self.weighted_matrix(), full_matrices=False)
        keep = s > epsilon
        return U[:, keep], s

    def reduce_randomized(self, epsilon: float, k: int, seed=0):
        """Sketch the range with k Gaussian boundary vectors, then SVD the projected operator."""
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.M == 0:
            return np.zeros((self.n_local, 0)), np.zeros(0), 0
        if k > self.M:
            log.warning("subdomain %d: sketch size %d clamped to %d", self.sub.subdomain, k, self.M)
            k = self.M
        k = max(int(k), 1)
        seq = np.random.SeedSequence(seed)
        for attempt in range(2):
            rng = np.random.Generator(np.random.Philox(seq.spawn(1)[0] if attempt else seq))
            sketch = rng.standard_normal((self.M, k))
            Y = self.weighted_apply(sketch)
            Qh, Rh = sla.qr(Y, mode="economic")
            diag = np.abs(np.diag(Rh))
            rank = int((diag > 1e-13 * diag.max(initial=0.0)).sum()) if diag.size else 0
            if rank == min(k, self.n_local):
                break
            log.warning("subdomain %d: rank-deficient sketch (%d of %d), attempt %d",
                        self.sub.subdomain, rank, k, attempt + 1)
        # two left solves: (W^T Qh)^T = Qh^T W
        Bh = self.weighted_apply_transpose(Qh).T
        Ub, s, _ = sla.svd(Bh, full_matrices=False)
        keep = s > epsilon
        n_keep = int(keep.sum())
        if rank < min(k, self.n_local) and n_keep >= rank:
            raise WorkerError("sketch is rank deficient and too small for the requested tolerance")
        if n_keep == Qh.shape[1] and k < self.M:
            log.warning("subdomain %d: every sketched direction kept; sketch may be too small", self.sub.subdomain)
        return Qh @ Ub[:, keep], s, k

    def local_error_ratio(self, u_ext: np.ndarray, U_weighted: np.ndarray) -> float:
        """||u - v_i||_{1,omega_i} / ||u||_{1,omega_i^+} for a global FE solution.

        ``u_ext`` holds the values of u at I followed by B; ``U_weighted`` the
        kept left singular vectors (orthonormal, weighted coordinates).
        """
        beta = u_ext[self.N:]
        w = self.R_i @ self.lift(beta)
        err = w - U_weighted @ (U_weighted.T @ w)
        norm_ext = np.sqrt(u_ext @ (self.H_ext @ u_ext))
        return float(np.linalg.norm(err) / norm_ext)

    # -- basis assembly ----------------------------------------------------

    def build_basis(self, U_weighted: np.ndarray, singular_values, method: str, sketch: int = 0,
                    diagonalize: bool = True, normalize: bool = True) -> LocalBasis:
        n_kept = U_weighted.shape[1]
        if n_kept > max(self.M, 0):
            raise WorkerError("kept more modes than boundary DOFs")
        modes = sla.solve_triangular(self.R_i, U_weighted, lower=False) if n_kept else np.zeros((self.n_local, 0))
        Q = modes[self.D]
        q0 = self.particular_solution()[self.D]
        has_particular = bool(np.linalg.norm(q0) >= 1e-14)
        if has_particular:
            Q = np.column_stack([Q, q0])
        block = None
        if Q.shape[1] and diagonalize:
            Q, lam = diagonalize_block(Q, self.A_owned, normalize=normalize, rank_tol=RANK_TOL)
        else:
            block = Q.T @ (self.A_owned @ Q)
            block = 0.5 * (block + block.T)
            lam = np.diag(block).copy()
        rhs = project_rhs(Q, self.owned_load())
        deflated = n_kept + int(has_particular) - Q.shape[1]
        return LocalBasis(
            subdomain=self.sub.subdomain,
            owned_nodes=self.sub.global_nodes[self.sub.owned],
            Q=Q,
            block_diagonal=lam,
            rhs=rhs,
            interface_rows=np.asarray(self.sub.interface_rows, dtype=np.int64),
            singular_values=np.asarray(singular_values, dtype=float),
            n_kept=n_kept,
            has_particular=has_particular,
            method=method,
            n_interior=self.N,
            n_boundary=self.M,
            sketch_size=sketch,
            diagnostics={"deflated": deflated},
            block=block,
        )

    def owned_load(self) -> np.ndarray:
        if self.load is None:
            return np.zeros(len(self.sub.owned))
        return assemble_load(self.mesh, self.load, self.sub.owned, elements=self.sub.omega_elements)


def diagonalize_block(Q: np.ndarray, A_block, normalize: bool = True, rank_tol: Optional[float] = None) -> tuple:
    """Rotate Q by the eigenvectors of Q^T A Q; returns (Q V, eigenvalues).

    With ``normalize`` the columns are also scaled to unit energy, so the
    projected block is the identity and the returned diagonal is all ones.
    Without ``rank_tol`` a numerically singular block is an error; with it,
    eigen-directions below ``rank_tol * max eigenvalue`` are dropped.
    """
    K = Q.T @ (A_block @ Q)
    K = 0.5 * (K + K.T)
    lam, V = sla.eigh(K)
    if lam.size and lam[-1] <= 0:
        raise WorkerError("projected block is not positive definite")
    tol = (1e-14 if rank_tol is None else rank_tol) * (lam[-1] if lam.size else 0.0)
    keep = lam > tol
    if not keep.all():
        if rank_tol is None:
            raise WorkerError(f"projected block has non-positive eigenvalue {lam[0]:.3e}; basis is rank deficient")
        log.warning("dropping %d of %d basis directions that are dependent on the owned nodes",
                    int((~keep).sum()), lam.size)
        lam, V = lam[keep], V[:, keep]
    if normalize:
        return Q @ (V / np.sqrt(lam)), np.ones_like(lam)
    return Q @ V, lam


def project_rhs(Q: np.ndarray, b_owned: np.ndarray) -> np.ndarray:
    return Q.T @ b_owned


def reduce_subdomain(sub: Submesh, epsilon: float, method: str = "randomized", coefficient=None, load=None,
                     sketch_divisor: int = 8, seed=0, max_boundary: int = DEFAULT_EXPLICIT_CAP) -> LocalBasis:
    """Full worker computation for one subdomain."""
    prob = LocalProblem(sub, coefficient=coefficient, load=load)
    if method == "explicit":
        U, s = prob.reduce_explicit(epsilon, max_boundary=max_boundary)
        k = 0
    elif method == "randomized":
        U, s, k = prob.reduce_randomized(epsilon, sketch_size(prob.M, sketch_divisor), seed=seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    basis = prob.build_basis(U, s, method, sketch=k)
    basis.diagnostics.update(n_local=prob.n_local)
    return basis
