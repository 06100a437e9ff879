import numpy as np
import pytest
import scipy.sparse as sp

from resflow.errors import DivergenceError, InputError
from resflow.linalg import (DistCsrMatrix, DistVector, Layout, SolverConfig,
                            bicgstab, ddot, gmres, norm2, orthomin,
                            read_matrix_market, read_vector, solve,
                            write_matrix_market, write_vector)
from resflow.precond import ILU0


def laplacian_1d(n):
    main = 2.0 * np.ones(n)
    off = -np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def laplacian_2d(n):
    one = laplacian_1d(n)
    eye = sp.identity(n, format="csr")
    return (sp.kron(one, eye) + sp.kron(eye, one)).tocsr()


# --- layout + distributed kernels --------------------------------------------

def test_layout_partitions_rows():
    lay = Layout.from_sizes([3, 2, 4])
    assert lay.size == 9
    assert lay.nlocal(0) == 3 and lay.nlocal(2) == 4
    assert lay.owner_of(0) == 0 and lay.owner_of(4) == 1 and lay.owner_of(8) == 2


def test_ddot_and_norm_match_numpy(rng):
    lay = Layout.trivial(50, num_workers=3)
    x, y = rng.standard_normal(50), rng.standard_normal(50)
    assert ddot(lay, x, y) == pytest.approx(np.dot(x, y), rel=1e-14)
    assert norm2(lay, x) == pytest.approx(np.linalg.norm(x), rel=1e-14)


def test_zero_vector_dot_and_norm():
    lay = Layout.trivial(7)
    z = np.zeros(7)
    assert ddot(lay, z, z) == 0.0
    assert norm2(lay, z) == 0.0


def test_spmv_dense_triple_loop_oracle(rng):
    n = 10
    dense = rng.standard_normal((n, n))
    dense[np.abs(dense) < 0.6] = 0.0  # keep it sparse
    np.fill_diagonal(dense, 4.0)
    A = DistCsrMatrix.from_scipy(sp.csr_matrix(dense), num_workers=2)
    x = rng.standard_normal(n)
    expect = np.zeros(n)
    for i in range(n):
        for j in range(n):
            expect[i] += dense[i, j] * x[j]
    assert np.allclose(A.matvec(x), expect, atol=1e-13)


def test_spmv_invariant_under_worker_count(rng):
    A = laplacian_2d(6)
    A = A + sp.diags(rng.uniform(0.1, 1.0, A.shape[0]))
    x = rng.standard_normal(A.shape[0])
    base = DistCsrMatrix.from_scipy(A.tocsr(), num_workers=1).matvec(x)
    for nw in (2, 4):
        y = DistCsrMatrix.from_scipy(A.tocsr(), num_workers=nw).matvec(x)
        assert np.allclose(y, base, atol=1e-14, rtol=0)


def test_from_coo_sums_duplicates():
    lay = Layout.trivial(3)
    rows = np.array([0, 0, 1, 2, 2, 2])
    cols = np.array([0, 0, 1, 2, 2, 0])
    vals = np.array([1.0, 2.0, 5.0, 3.0, 4.0, 1.5])
    A = DistCsrMatrix.from_coo(lay, rows, cols, vals)
    S = A.to_scipy().toarray()
    expect = np.array([[3.0, 0, 0], [0, 5.0, 0], [1.5, 0, 7.0]])
    assert np.array_equal(S, expect)


def test_matrix_market_round_trip(tmp_path, rng):
    A = laplacian_2d(4) + sp.diags(rng.uniform(0.5, 2.0, 16))
    path = tmp_path / "a.mtx"
    write_matrix_market(path, DistCsrMatrix.from_scipy(A.tocsr()))
    B = read_matrix_market(path, num_workers=2)
    assert np.allclose(B.to_scipy().toarray(), A.toarray(), atol=1e-15)
    v = rng.standard_normal(16)
    vpath = tmp_path / "b.vec"
    write_vector(vpath, v)
    assert np.allclose(read_vector(vpath), v, atol=0)


# --- Krylov solvers -----------------------------------------------------------

def test_gmres_identity_converges_first_iteration(rng):
    A = DistCsrMatrix.from_scipy(sp.identity(12, format="csr"))
    b = rng.standard_normal(12)
    res = gmres(A, b, SolverConfig(method="gmres", tol=1e-12))
    assert res.converged and res.iterations <= 1
    assert np.allclose(res.x, b, atol=1e-12)


def test_gmres_diagonal_oracle(rng):
    d = rng.uniform(1.0, 9.0, 20)
    A = DistCsrMatrix.from_scipy(sp.diags(d).tocsr())
    b = rng.standard_normal(20)
    res = gmres(A, b, SolverConfig(tol=1e-12, maxit=500))
    assert res.converged
    assert np.allclose(res.x, b / d, atol=1e-10)


def test_gmres_residuals_nonincreasing_within_restart():
    A = DistCsrMatrix.from_scipy(laplacian_2d(8))
    b = np.ones(64)
    res = gmres(A, b, SolverConfig(tol=1e-10, maxit=300, restart=40))
    norms = np.array(res.residual_norms)
    assert np.all(np.diff(norms) <= 1e-12 * norms[0])


def test_bicgstab_with_ilu0_is_fast():
    # tridiagonal system: ILU(0) carries the full pattern, so the
    # preconditioner is essentially a direct solve
    A = laplacian_1d(32)
    b = np.ones(32)
    M = ILU0(A)
    dA = DistCsrMatrix.from_scipy(A)
    res = bicgstab(dA, b, SolverConfig(method="bicgstab", tol=1e-8, maxit=200), M=M)
    assert res.converged
    assert res.iterations <= 10
    # true residual at exit honors the tolerance
    r = b - dA.matvec(res.x)
    assert np.linalg.norm(r) <= 1e-8 * np.linalg.norm(b) * 1.01


def test_bicgstab_singular_inconsistent_raises():
    # rank-deficient system with b outside the range
    A = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    b = np.array([1.0, 1.0])
    with pytest.raises(DivergenceError):
        bicgstab(DistCsrMatrix.from_scipy(A), b,
                 SolverConfig(method="bicgstab", tol=1e-10, maxit=50))


def test_orthomin_identity_and_diagonal(rng):
    A = DistCsrMatrix.from_scipy(sp.identity(9, format="csr"))
    b = rng.standard_normal(9)
    res = orthomin(A, b, SolverConfig(method="orthomin", tol=1e-12))
    assert res.converged and res.iterations <= 1
    d = rng.uniform(1.0, 4.0, 15)
    A = DistCsrMatrix.from_scipy(sp.diags(d).tocsr())
    b = rng.standard_normal(15)
    res = orthomin(A, b, SolverConfig(method="orthomin", tol=1e-11, maxit=300))
    assert res.converged
    assert np.allclose(res.x, b / d, atol=1e-9)


def test_orthomin_k1_residuals_nonincreasing():
    A = DistCsrMatrix.from_scipy(laplacian_2d(6))
    b = np.ones(36)
    res = orthomin(A, b, SolverConfig(method="orthomin", tol=1e-9,
                                      maxit=400, korth=1))
    norms = np.array(res.residual_norms)
    assert np.all(np.diff(norms) <= 1e-12 * norms[0])
    assert res.converged


def test_fixed_iteration_count_is_exact():
    A = DistCsrMatrix.from_scipy(laplacian_2d(10))
    b = np.ones(100)
    for method in ("gmres", "orthomin"):
        cfg = SolverConfig(method=method, tol=1e-30, maxit=1000, fixed_iters=90)
        res = solve(A, b, cfg)
        assert res.iterations == 90
    # bicgstab cannot run past convergence without rho breakdown
    with pytest.raises(InputError):
        solve(A, b, SolverConfig(method="bicgstab", fixed_iters=90))


def test_solver_reports_true_residual(rng):
    A = laplacian_2d(8) + sp.diags(rng.uniform(0.0, 0.5, 64))
    dA = DistCsrMatrix.from_scipy(A.tocsr())
    b = rng.standard_normal(64)
    for method in ("gmres", "bicgstab", "orthomin"):
        res = solve(dA, b, SolverConfig(method=method, tol=1e-9, maxit=500))
        assert res.converged, method
        true_r = b - dA.matvec(res.x)
        assert np.linalg.norm(true_r) <= 1e-9 * np.linalg.norm(b) * 1.01, method
        assert np.allclose(res.residual, true_r, atol=1e-13)


def test_solver_config_validation():
    with pytest.raises(InputError):
        SolverConfig(method="cg")
    with pytest.raises(InputError):
        SolverConfig(tol=-1.0)
    with pytest.raises(InputError):
        SolverConfig(fixed_iters=0)


def test_dist_vector_round_trip(rng):
    lay = Layout.from_sizes([4, 3])
    v = DistVector(lay, rng.standard_normal(7))
    assert v.nlocal(0) == 4
    assert np.array_equal(v.local(1), v.data[4:])
    assert v.norm2() == pytest.approx(np.linalg.norm(v.data), rel=1e-14)
