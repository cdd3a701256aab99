import logging

import numpy as np
import pytest
from scipy import sparse

from ddrom.assembly import assemble_h1_matrix, assemble_load, assemble_stiffness, unit_energy_load
from ddrom.decomposition import decompose, extract_submesh
from ddrom.local import (LocalProblem, SPDFactor, WorkerError, diagonalize_block, project_rhs, reduce_subdomain,
                         sketch_size, trailing_cholesky_block)
from ddrom.mesh import generate_unit_cube_mesh


def dense_parts(prob):
    """Independent dense construction of the weighted lifting operator."""
    sub, mesh = prob.sub, prob.mesh
    I, B = sub.interior, sub.boundary
    dofs = np.concatenate([I, B])
    N = len(I)
    A = assemble_stiffness(mesh, dofs).toarray()
    H = assemble_h1_matrix(mesh, dofs).toarray()
    S = H[N:, N:] - H[N:, :N] @ np.linalg.solve(H[:N, :N], H[:N, N:])
    Z = -np.linalg.solve(A[:N, :N], A[:N, N:])[prob.C]
    H_i = assemble_h1_matrix(mesh, prob.local_dofs, elements=sub.omega_elements).toarray()
    W = np.linalg.cholesky(H_i).T @ Z @ np.linalg.inv(np.linalg.cholesky(S).T)
    return A, H, S, Z, W


@pytest.fixture(scope="module")
def problems(cube8_dec):
    _, _, subs = cube8_dec
    return [LocalProblem(s, load=unit_energy_load) for s in subs]


def test_spd_factor_is_ldlt(rng):
    X = sparse.random(60, 60, density=0.05, random_state=1)
    A = (X @ X.T + sparse.eye(60) * 3).tocsc()
    f = SPDFactor(A)
    P = A[f.order][:, f.order].toarray()
    L = f.lu.L.toarray()
    np.testing.assert_allclose(L @ np.diag(f.d) @ L.T, P, atol=1e-12)
    b = rng.standard_normal(60)
    np.testing.assert_allclose(f.solve(b), np.linalg.solve(A.toarray(), b), rtol=1e-10)
    y = f.half_solve(b)
    assert y @ y == pytest.approx(b @ np.linalg.solve(A.toarray(), b), rel=1e-12)


def test_spd_factor_rejects_indefinite():
    with pytest.raises(WorkerError):
        SPDFactor(sparse.csc_matrix(np.diag([1.0, -1.0, 2.0])))


def test_trailing_block_one_interior_node():
    H = np.array([[4.0, 1.0, 2.0], [1.0, 3.0, 0.5], [2.0, 0.5, 5.0]])
    R_BB, _ = trailing_cholesky_block(sparse.csc_matrix(H), 1)
    S = H[1:, 1:] - np.outer(H[1:, 0], H[0, 1:]) / H[0, 0]
    np.testing.assert_allclose(R_BB.T @ R_BB, S, atol=1e-12)
    # identical to the bottom-right block of the full Cholesky factor
    np.testing.assert_allclose(R_BB, np.linalg.cholesky(H).T[1:, 1:], atol=1e-12)


def test_weight_factors_match_dense_schur(problems):
    for prob in problems:
        _, _, S, _, _ = dense_parts(prob)
        err = np.linalg.norm(prob.R_BB.T @ prob.R_BB - S) / np.linalg.norm(S)
        assert err < 1e-10
        assert np.allclose(np.tril(prob.R_BB, -1), 0) and (np.diag(prob.R_BB) > 0).all()
        assert (np.diag(prob.R_i) > 0).all()


def test_trace_norm_is_minimal_extension_norm(problems, rng):
    for prob in problems:
        H = prob.H_ext.toarray()
        N = prob.N
        for _ in range(5):
            beta = rng.standard_normal(prob.M)
            beta_I = -np.linalg.solve(H[:N, :N], H[:N, N:] @ beta)
            v = np.concatenate([beta_I, beta])
            assert np.linalg.norm(prob.R_BB @ beta) == pytest.approx(np.sqrt(v @ H @ v), rel=1e-10)


def test_lift_solves_the_zero_load_problem(problems, rng):
    for prob in problems:
        A, _, _, Z, _ = dense_parts(prob)
        beta = rng.standard_normal(prob.M)
        np.testing.assert_allclose(prob.lift(beta), Z @ beta, rtol=1e-9, atol=1e-12)
        full = np.concatenate([prob.stiff.solve(-(prob.A_IB @ beta)), beta])
        np.testing.assert_allclose((A @ full)[: prob.N], 0.0, atol=1e-10)


def test_weighted_operator_and_transpose(problems, rng):
    for prob in problems:
        W = dense_parts(prob)[4]
        np.testing.assert_allclose(prob.weighted_matrix(), W, atol=1e-10)
        Y = rng.standard_normal((prob.n_local, 3))
        np.testing.assert_allclose(prob.weighted_apply_transpose(Y), W.T @ Y, atol=1e-10)


def test_largest_singular_value_by_power_iteration(problems, rng):
    prob = problems[0]
    x = rng.standard_normal(prob.M)
    for _ in range(300):
        x = prob.weighted_apply_transpose(prob.weighted_apply(x[:, None]))[:, 0]
        x /= np.linalg.norm(x)
    sigma = np.linalg.norm(prob.weighted_apply(x[:, None]))
    assert sigma == pytest.approx(prob.spectrum()[0], rel=1e-8)


def test_particular_solution_vs_dense(problems):
    for prob in problems:
        A = dense_parts(prob)[0]
        b = assemble_load(prob.mesh, unit_energy_load, prob.sub.interior)
        np.testing.assert_allclose(prob.particular_solution(), np.linalg.solve(A[: prob.N, : prob.N], b)[prob.C],
                                   rtol=1e-10)
    assert not LocalProblem(problems[0].sub).particular_solution().any()


def test_saturated_extension_reduces_to_full_solution():
    mesh = generate_unit_cube_mesh(5)
    dec = decompose(mesh, 1, 1)
    prob = LocalProblem(extract_submesh(mesh, dec, 0), load=unit_energy_load)
    assert prob.M == 0 and prob.R_BB.shape == (0, 0) and prob.spectrum().size == 0
    f = mesh.free_nodes
    u = np.linalg.solve(assemble_stiffness(mesh, f).toarray(), assemble_load(mesh, unit_energy_load, f))
    np.testing.assert_allclose(prob.particular_solution(), u, rtol=1e-10)
    basis = reduce_subdomain(prob.sub, 1e-2, load=unit_energy_load)
    assert basis.size == 1 and basis.n_kept == 0 and basis.has_particular


@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-3])
def test_truncation_contract(problems, eps):
    for prob in problems:
        U, s = prob.reduce_explicit(eps)
        m = U.shape[1]
        assert np.all(np.diff(s) <= 1e-15)
        assert m == 0 or s[m - 1] > eps
        assert m == s.size or s[m] <= eps
        np.testing.assert_allclose(U.T @ U, np.eye(m), atol=1e-12)


def test_tolerance_above_top_singular_value(problems):
    prob = problems[0]
    U, s = prob.reduce_explicit(2 * prob.spectrum()[0])
    assert U.shape[1] == 0
    basis = prob.build_basis(U, s, "explicit")
    assert basis.size == 1 and basis.has_particular


def test_explicit_cap(problems):
    with pytest.raises(WorkerError, match="randomized"):
        problems[0].reduce_explicit(1e-2, max_boundary=problems[0].M - 1)
    with pytest.raises(ValueError):
        problems[0].reduce_explicit(0.0)


def test_full_sketch_matches_explicit(problems):
    for prob in problems:
        _, s_exp = prob.reduce_explicit(1e-3)
        U, s_rnd, k = prob.reduce_randomized(1e-3, prob.M, seed=3)
        assert k == prob.M
        np.testing.assert_allclose(s_rnd[: s_exp.size], s_exp[: s_rnd.size], atol=1e-10)


def test_randomized_is_deterministic_and_clamps(problems, caplog):
    prob = problems[1]
    a = prob.reduce_randomized(1e-2, 20, seed=[7, 1])
    b = prob.reduce_randomized(1e-2, 20, seed=[7, 1])
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with caplog.at_level(logging.WARNING):
        _, _, k = prob.reduce_randomized(1e-2, prob.M + 5, seed=0)
    assert k == prob.M and "clamped" in caplog.text


def test_sketch_size_rule():
    assert sketch_size(0) == 0
    assert sketch_size(10) == 10
    assert sketch_size(100) == 32
    assert sketch_size(800) == 100
    assert sketch_size(801, 8) == 100


def test_local_error_bound(cube8_dec, problems):
    mesh, dec, subs = cube8_dec
    f = mesh.free_nodes
    A = assemble_stiffness(mesh, f)
    u = np.zeros(mesh.n_vertices)
    u[f] = np.linalg.solve(A.toarray(), assemble_load(mesh, unit_energy_load, f))
    for prob in problems:
        U, _ = prob.reduce_explicit(1e-2)
        g = prob.sub.global_nodes
        u_ext = u[g[np.concatenate([prob.sub.interior, prob.sub.boundary])]]
        assert prob.local_error_ratio(u_ext, U) < 1e-2


def test_diagonalize_block(rng):
    X = rng.standard_normal((30, 30))
    A = X @ X.T + np.eye(30)
    Q = rng.standard_normal((30, 5))
    Qr, lam = diagonalize_block(Q, A, normalize=False)
    K = Qr.T @ A @ Qr
    assert np.abs(K - np.diag(np.diag(K))).max() <= 1e-10 * np.abs(lam).max()
    np.testing.assert_allclose(np.diag(K), lam, rtol=1e-10)
    Qn, ones = diagonalize_block(Q, A)
    np.testing.assert_allclose(Qn.T @ A @ Qn, np.eye(5), atol=1e-10)
    assert (ones == 1).all()
    q = Q[:, :1]
    q1, l1 = diagonalize_block(q, A, normalize=False)
    assert l1[0] == pytest.approx((q.T @ A @ q)[0, 0])
    np.testing.assert_allclose(np.abs(q1), np.abs(q))
    with pytest.raises(WorkerError):
        diagonalize_block(np.column_stack([q, 2 * q]), A)


def test_project_rhs_simple():
    assert project_rhs(np.array([[1.0], [2.0]]), np.array([3.0, 4.0]))[0] == 11.0
    assert not project_rhs(np.ones((3, 2)), np.zeros(3)).any()


def test_basis_fields(problems):
    for prob in problems:
        b = reduce_subdomain(prob.sub, 1e-2, method="explicit", load=unit_energy_load)
        assert b.Q.shape == (len(prob.sub.owned), b.size)
        assert b.size == b.n_kept + int(b.has_particular) - b.diagnostics["deflated"]
        assert b.n_kept <= b.n_boundary
        K = b.Q.T @ (prob.A_owned @ b.Q)
        np.testing.assert_allclose(K, np.diag(b.block_diagonal), atol=1e-8)
        assert (b.block_diagonal > 0).all()
        np.testing.assert_allclose(b.rhs, b.Q.T @ prob.owned_load(), atol=1e-14)
    with pytest.raises(ValueError):
        reduce_subdomain(problems[0].sub, 1e-2, method="magic")
