"""3x3-blocked CSR storage, assembly and block-Jacobi preconditioning."""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._validation import check_multivector, check_vector


@dataclass
class BlockCSR3:
    n_nodes: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    blocks: np.ndarray
    constrained_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    _bsr: object = field(default=None, init=False, repr=False)

    @property
    def n_dofs(self):
        return 3 * self.n_nodes

    @property
    def n_blocks(self):
        return self.col_idx.size

    def to_scipy(self):
        if self._bsr is None:
            n = self.n_dofs
            self._bsr = sp.bsr_matrix((self.blocks, self.col_idx, self.row_ptr), shape=(n, n))
        return self._bsr

    def to_dense(self):
        return self.to_scipy().toarray()

    def row_indices(self):
        return np.repeat(np.arange(self.n_nodes), np.diff(self.row_ptr))

    def diagonal_blocks(self):
        rows = self.row_indices()
        hit = np.flatnonzero(self.col_idx == rows)
        if hit.size != self.n_nodes:
            raise ValueError("matrix is missing diagonal blocks")
        return self.blocks[hit]


def assemble_blocks(node_map, element_mats, n_nodes):
    """Sum ``P_e^T A_e P_e`` over elements into a :class:`BlockCSR3`.

    Duplicate (row, col) contributions are summed in element order, so the
    result is reproducible.
    """
    node_map = np.asarray(node_map, dtype=np.int64)
    n_el, nen = node_map.shape
    if element_mats.shape != (n_el, 3 * nen, 3 * nen):
        raise ValueError("element matrices do not match the element-node map")
    if node_map.max(initial=-1) >= n_nodes:
        raise ValueError("element-node map references a node beyond n_nodes")
    if n_el * nen * nen >= np.iinfo(np.int64).max // max(n_nodes, 1):
        raise OverflowError("block count overflows the index type")

    rows = np.repeat(node_map, nen, axis=1).ravel()
    cols = np.tile(node_map, (1, nen)).ravel()
    local = element_mats.reshape(n_el, nen, 3, nen, 3).transpose(0, 1, 3, 2, 4)
    local = local.reshape(-1, 3, 3)

    keys = rows * n_nodes + cols
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    blocks = np.add.reduceat(local[order], starts, axis=0)
    ukeys = keys[starts]
    brow, bcol = ukeys // n_nodes, ukeys % n_nodes
    row_ptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(row_ptr, brow + 1, 1)
    np.cumsum(row_ptr, out=row_ptr)
    return BlockCSR3(n_nodes, row_ptr, bcol.astype(np.int64), np.ascontiguousarray(blocks))


def apply_dirichlet(A, constrained_dofs):
    """Zero constrained rows/columns in place and put 1 on their diagonal."""
    constrained_dofs = np.asarray(constrained_dofs, dtype=np.int64)
    mask = np.zeros(A.n_dofs, dtype=bool)
    mask[constrained_dofs] = True
    mask = mask.reshape(-1, 3)
    rows = A.row_indices()
    rmask = mask[rows]
    cmask = mask[A.col_idx]
    kill = rmask[:, :, None] | cmask[:, None, :]
    A.blocks[kill] = 0.0
    diag = np.flatnonzero(rows == A.col_idx)
    for d in range(3):
        hit = diag[mask[rows[diag], d]]
        A.blocks[hit, d, d] = 1.0
    A.constrained_dofs = np.sort(constrained_dofs)
    A._bsr = None
    return A


def assemble_system(mesh, element_ops, dt):
    """Assemble the Newmark system matrix with bottom DOFs eliminated in place."""
    if element_ops.n_elements != mesh.n_elements or element_ops.n_nodes != mesh.n_nodes:
        raise ValueError("element operators were built for a different mesh")
    A = assemble_blocks(element_ops.node_map, element_ops.system_operators(dt), mesh.n_nodes)
    return apply_dirichlet(A, element_ops.constrained_dofs)


def assemble_mass_stiffness(element_ops):
    """Unconstrained global M and K, used for the Newmark right-hand side."""
    M = assemble_blocks(element_ops.node_map, element_ops.M, element_ops.n_nodes)
    K = assemble_blocks(element_ops.node_map, element_ops.K, element_ops.n_nodes)
    return M, K


def bsr_matvec(A, x):
    """``A @ x`` for a vector (n,) or a multi-vector (n, r)."""
    if np.ndim(x) == 2:
        x = check_multivector(x, A.n_dofs)
    else:
        x = check_vector(x, A.n_dofs)
    return A.to_scipy() @ x


@dataclass
class BlockJacobi:
    inv_diag: np.ndarray


def build_block_jacobi(A):
    diag = A.diagonal_blocks() if isinstance(A, BlockCSR3) else np.asarray(A)
    return block_jacobi_from_diagonal(diag)


def block_jacobi_from_diagonal(diag):
    diag = np.asarray(diag, dtype=float)
    det = np.linalg.det(diag)
    scale = np.max(np.abs(diag), axis=(1, 2)) ** 3
    bad = np.flatnonzero(~(np.abs(det) > 1e-14 * scale))
    if bad.size:
        raise np.linalg.LinAlgError(f"singular diagonal block at node {bad[0]}")
    return BlockJacobi(np.linalg.inv(diag))


def apply_block_jacobi(B, r):
    """``z = B^{-1} r`` node by node; ``r`` may be (n,) or (n, lanes)."""
    inv = B.inv_diag
    if r.ndim == 1:
        return np.einsum("nij,nj->ni", inv, r.reshape(-1, 3)).ravel()
    lanes = r.shape[1]
    z = np.einsum("nij,njr->nir", inv, r.reshape(-1, 3, lanes))
    return z.reshape(-1, lanes)


def write_triplets(A, path):
    """Dump nonzero scalar entries as ``i j value`` lines under an ``nrows ncols nnz`` header."""
    coo = A.to_scipy().tocoo()
    keep = coo.data != 0.0
    i, j, v = coo.row[keep], coo.col[keep], coo.data[keep]
    order = np.lexsort((j, i))
    with open(path, "w") as fh:
        fh.write(f"{A.n_dofs} {A.n_dofs} {order.size}\n")
        for a, b, c in zip(i[order], j[order], v[order]):
            fh.write(f"{a} {b} {c:.17g}\n")


def read_triplets(path):
    with open(path) as fh:
        n, m, _ = (int(t) for t in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix((n, m))
    return sp.csr_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=(n, m))
