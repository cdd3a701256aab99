"""Reduced solve, reconstruction of the nodal solution, errors and condition estimates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import scipy.linalg as sla
from scipy import sparse

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


@dataclass
class SolveReport:
    x: np.ndarray
    iterations: int
    residual: float
    dim_full: int = 0
    dim_reduced: int = 0
    nnz_reduced: int = 0
    energy_error: Optional[float] = None
    reduction_error: Optional[float] = None
    fe_error: Optional[float] = None
    kappa_full: Optional[float] = None
    kappa_reduced: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        rec = {
            "iterations": self.iterations,
            "residual": self.residual,
            "dim_full": self.dim_full,
            "dim_reduced": self.dim_reduced,
            "nnz_reduced": self.nnz_reduced,
            "energy_error": self.energy_error,
            "reduction_error": self.reduction_error,
            "fe_error": self.fe_error,
            "kappa_full": self.kappa_full,
            "kappa_reduced": self.kappa_reduced,
        }
        rec.update(self.extra)
        return rec


def pcg_jacobi(A, b, tol: float = 1e-10, max_iter: Optional[int] = None, x0=None):
    """Conjugate gradients with the diagonal of A as preconditioner.

    Returns (x, iterations, relative residual).  Raises ConvergenceError
    carrying the last residuals when ``max_iter`` is exhausted.
    """
    A = sparse.csr_matrix(A) if sparse.issparse(A) else np.asarray(A)
    b = np.asarray(b, dtype=float)
    n = b.size
    if max_iter is None:
        max_iter = max(10 * n, 10)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    diag = A.diagonal() if sparse.issparse(A) else np.diag(A).copy()
    if (diag <= 0).any():
        raise ValueError("matrix has a non-positive diagonal entry; not SPD")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = r / diag
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    it = 0
    while history[-1] > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"PCG did not reach {tol:g} in {max_iter} iterations (residual {history[-1]:.3e})", history[-10:]
            )
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise ConvergenceError("matrix is not positive definite (p^T A p <= 0)", history[-10:])
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        history.append(np.linalg.norm(r) / bnorm)
        z = r / diag
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, it, history[-1]


def reconstruct(x: np.ndarray, bases: Iterable, offsets, n_nodes: int) -> np.ndarray:
    """Nodal vector sum_i S_i(Q_i x_i); each owned node is written once."""
    u = np.zeros(n_nodes)
    written = np.zeros(n_nodes, dtype=bool)
    for i, b in enumerate(bases):
        xi = x[offsets[i]: offsets[i + 1]]
        if written[b.owned_nodes].any():
            raise ValueError(f"subdomain {i} writes a node owned by another subdomain")
        u[b.owned_nodes] = b.Q @ xi
        written[b.owned_nodes] = True
    return u


def energy_error(x: np.ndarray, A_reduced) -> float:
    """(1 - x^T A x)^{1/2} for a load whose exact solution has unit energy norm."""
    e2 = 1.0 - float(x @ (A_reduced @ x))
    if e2 < 0:
        log.warning("energy error radicand %.3e < 0 clamped to zero", e2)
        e2 = 0.0
    return math.sqrt(e2)


def reduction_error(u: np.ndarray, u_tilde: np.ndarray, A) -> float:
    """Energy norm of u - u_tilde with the stiffness matrix A (vectors on the same DOFs)."""
    e = np.asarray(u) - np.asarray(u_tilde)
    e2 = float(e @ (A @ e))
    if e2 < 0:
        log.warning("reduction error radicand %.3e < 0 clamped to zero", e2)
        e2 = 0.0
    return math.sqrt(e2)


@dataclass
class ConditionEstimate:
    kappa: float
    lambda_min: float
    lambda_max: float
    converged: bool
    interval: tuple  # bounds on kappa from Ritz residuals

    def __float__(self):
        return self.kappa


def lanczos_extremes(A, steps: int = 300, tol: float = 1e-3, seed: int = 0):
    """Extreme eigenvalues of SPD A by Lanczos with full reorthogonalisation.

    Returns (lambda_min, lambda_max, residual bounds, converged).
    """
    n = A.shape[0]
    if n == 0:
        raise ValueError("empty matrix")
    if n <= 600:
        dense = A.toarray() if sparse.issparse(A) else np.asarray(A)
        w = sla.eigvalsh(dense)
        return w[0], w[-1], (0.0, 0.0), True
    rng = np.random.default_rng(seed)
    steps = min(steps, n)
    V = np.zeros((steps + 1, n))
    alpha = np.zeros(steps)
    beta = np.zeros(steps)
    v = rng.standard_normal(n)
    V[0] = v / np.linalg.norm(v)
    m = steps
    res = (np.inf, np.inf)
    for j in range(steps):
        w = A @ V[j]
        alpha[j] = V[j] @ w
        w -= alpha[j] * V[j]
        if j:
            w -= beta[j - 1] * V[j - 1]
        # twice is enough
        w -= V[: j + 1].T @ (V[: j + 1] @ w)
        w -= V[: j + 1].T @ (V[: j + 1] @ w)
        beta[j] = np.linalg.norm(w)
        if beta[j] < 1e-14 * abs(alpha[j]):
            m = j + 1
            break
        V[j + 1] = w / beta[j]
        if (j + 1) % 20 == 0 or j + 1 == steps:
            theta, S = sla.eigh_tridiagonal(alpha[: j + 1], beta[:j])
            res = (abs(beta[j] * S[-1, 0]), abs(beta[j] * S[-1, -1]))
            if res[0] <= tol * theta[0] and res[1] <= tol * theta[-1]:
                m = j + 1
                break
    theta, S = sla.eigh_tridiagonal(alpha[:m], beta[: m - 1])
    if m < steps and beta[m - 1] < 1e-14 * abs(alpha[m - 1]):
        res = (0.0, 0.0)
    else:
        res = (abs(beta[m - 1] * S[-1, 0]), abs(beta[m - 1] * S[-1, -1]))
    converged = res[0] <= tol * theta[0] and res[1] <= tol * theta[-1]
    return theta[0], theta[-1], res, converged


def condition_estimate(A, steps: int = 400, tol: float = 1e-3, seed: int = 0) -> ConditionEstimate:
    """kappa = lambda_max / lambda_min from Lanczos; an interval if not converged."""
    lo, hi, (rlo, rhi), ok = lanczos_extremes(A, steps=steps, tol=tol, seed=seed)
    if lo <= 0:
        raise ValueError("matrix is not positive definite")
    # Ritz values are inner bounds: lambda_min <= lo and lambda_max >= hi.
    # For an SPD matrix the residual gives lambda_min >= lo - rlo.
    kappa = hi / lo
    lower = hi / lo
    upper = (hi + rhi) / max(lo - rlo, np.finfo(float).tiny) if lo - rlo > 0 else np.inf
    if not ok:
        log.warning("Lanczos did not converge; condition number in [%.3g, %.3g]", lower, upper)
    return ConditionEstimate(kappa, lo, hi, ok, (lower, upper))
