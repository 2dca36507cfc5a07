import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from hetsolve.sparse import (apply_block_jacobi, apply_dirichlet, assemble_blocks,
                             assemble_mass_stiffness, assemble_system, block_jacobi_from_diagonal,
                             bsr_matvec, build_block_jacobi, read_triplets, write_triplets)

DT = 0.005


def dense_scatter(node_map, mats, n_nodes):
    out = np.zeros((3 * n_nodes, 3 * n_nodes))
    for nodes, Ae in zip(node_map, mats):
        dofs = (3 * nodes[:, None] + np.arange(3)).ravel()
        out[np.ix_(dofs, dofs)] += Ae
    return out


@pytest.fixture(scope="module")
def system(tiny_problem):
    return assemble_system(tiny_problem.mesh, tiny_problem.ops, DT)


def test_assembly_matches_dense_scatter(tiny_problem):
    ops = tiny_problem.ops
    A = assemble_blocks(ops.node_map, ops.K, ops.n_nodes)
    ref = dense_scatter(ops.node_map, ops.K, ops.n_nodes)
    assert np.allclose(A.to_dense(), ref, rtol=0, atol=1e-12 * np.abs(ref).max())
    rows = A.row_indices()
    assert np.all(np.diff(rows) >= 0)
    for i in range(A.n_nodes):
        cols = A.col_idx[A.row_ptr[i]:A.row_ptr[i + 1]]
        assert np.all(np.diff(cols) > 0)


def test_system_is_symmetric_with_identity_rows(system, tiny_problem):
    D = system.to_dense()
    assert np.allclose(D, D.T, rtol=0, atol=1e-9 * np.abs(D).max())
    c = tiny_problem.ops.constrained_dofs
    assert np.array_equal(D[c][:, c], np.eye(c.size))
    free = np.setdiff1d(np.arange(D.shape[0]), c)
    assert not D[np.ix_(c, free)].any() and not D[np.ix_(free, c)].any()
    assert np.linalg.eigvalsh(D).min() > 0


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_matvec_matches_dense(system, seed, lanes):
    rng = np.random.default_rng(seed)
    D = system.to_dense()
    x = rng.standard_normal(system.n_dofs)
    assert np.allclose(bsr_matvec(system, x), D @ x, rtol=0, atol=1e-12 * np.abs(D @ x).max())
    X = rng.standard_normal((system.n_dofs, lanes))
    assert np.allclose(bsr_matvec(system, X), D @ X, rtol=0, atol=1e-12 * np.abs(D @ X).max())


def test_matvec_shape_checked(system):
    with pytest.raises(ValueError):
        bsr_matvec(system, np.zeros(system.n_dofs + 1))


def test_mass_stiffness_assembly(tiny_problem):
    M, K = assemble_mass_stiffness(tiny_problem.ops)
    one = np.zeros(M.n_dofs)
    one[0::3] = 1.0
    rho_v = sum(tiny_problem.ops.M[e, 0::3, 0::3].sum() for e in range(tiny_problem.ops.n_elements))
    assert one @ bsr_matvec(M, one) == pytest.approx(rho_v, rel=1e-12)
    assert np.abs(bsr_matvec(K, one)).max() < 1e-6 * np.abs(K.blocks).max()


def test_dirichlet_keeps_pattern(tiny_problem):
    ops = tiny_problem.ops
    A = assemble_blocks(ops.node_map, ops.K, ops.n_nodes)
    B = apply_dirichlet(A, [0, 4])
    assert np.array_equal(A.col_idx, B.col_idx)
    D = B.to_dense()
    assert D[0, 0] == 1.0 and D[4, 4] == 1.0
    assert not D[0, 1:].any() and not D[:, 4][np.arange(D.shape[0]) != 4].any()


def test_block_jacobi_inverts_diagonal(system, rng):
    B = build_block_jacobi(system)
    diag = system.diagonal_blocks()
    assert np.allclose(np.matmul(B.inv_diag, diag), np.eye(3), atol=1e-12)
    r = rng.standard_normal((system.n_dofs, 3))
    z = apply_block_jacobi(B, r)
    for k in range(3):
        single = apply_block_jacobi(B, np.ascontiguousarray(r[:, k]))
        assert np.allclose(z[:, k], single, rtol=1e-14, atol=0)
    back = np.einsum("nij,njr->nir", diag, z.reshape(-1, 3, 3)).reshape(-1, 3)
    assert np.allclose(back, r, atol=1e-10)


def test_singular_block_raises():
    diag = np.stack([np.eye(3), np.diag([1.0, 1.0, 0.0])])
    with pytest.raises(np.linalg.LinAlgError):
        block_jacobi_from_diagonal(diag)


def test_triplet_round_trip(system, tmp_path):
    path = tmp_path / "A.txt"
    write_triplets(system, path)
    back = read_triplets(path)
    assert isinstance(back, sp.csr_matrix)
    assert np.array_equal(back.toarray(), system.to_dense())
    with open(path) as fh:
        n, m, nnz = map(int, fh.readline().split())
    assert (n, m, nnz) == (system.n_dofs, system.n_dofs, back.nnz)
