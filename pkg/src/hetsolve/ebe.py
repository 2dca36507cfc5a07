"""Matrix-free Element-by-Element products with one or several right-hand sides.

Elements are grouped into colours whose members share no node, so each
colour scatters with plain fancy-index accumulation: no write conflicts and
a fixed summation order, which keeps results bit-reproducible.

Multi-vectors are (n_dofs, r) C-ordered arrays: the r lane values of one
DOF sit next to each other, so one gather fetches all lanes at once.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_multivector, check_vector


def greedy_coloring(node_map):
    """Colour elements so that no two elements of one colour share a node."""
    node_map = np.asarray(node_map)
    n_nodes = int(node_map.max()) + 1 if node_map.size else 0
    used = np.zeros(n_nodes, dtype=object)
    used[:] = 0
    colors = np.empty(node_map.shape[0], dtype=np.int64)
    for e, nodes in enumerate(node_map.tolist()):
        mask = 0
        for n in nodes:
            mask |= used[n]
        c = 0
        while mask >> c & 1:
            c += 1
        colors[e] = c
        bit = 1 << c
        for n in nodes:
            used[n] |= bit
    return colors


@dataclass
class EBEPlan:
    dof_map: np.ndarray
    batches: list
    dof_batches: list
    constrained: np.ndarray


def plan_for(ops):
    plan = getattr(ops, "_ebe_plan", None)
    if plan is None:
        colors = greedy_coloring(ops.node_map)
        dof_map = ops.dof_map
        batches = [np.flatnonzero(colors == c) for c in range(colors.max() + 1)]
        plan = EBEPlan(dof_map, batches, [dof_map[b] for b in batches],
                       np.asarray(ops.constrained_dofs, dtype=np.int64))
        ops._ebe_plan = plan
    return plan


def ebe_apply(ops, w_mass, w_stiff, x):
    """``sum_e P_e^T (w_mass[e] M_e + w_stiff[e] K_e) P_e x`` with no constraint handling.

    ``x`` is (n_dofs,) or (n_dofs, r); weights are scalars or per-element
    arrays. The element operator is applied as ``w_mass*(M_e x_e) +
    w_stiff*(K_e x_e)`` so the combined 30x30 matrix is never stored.
    """
    if x.ndim == 2 and x.shape[1] == 1:
        return ebe_apply(ops, w_mass, w_stiff, x[:, 0])[:, None]
    plan = plan_for(ops)
    multi = x.ndim == 2
    xe = x[plan.dof_map] if multi else x[plan.dof_map][..., None]
    wm = np.broadcast_to(np.asarray(w_mass, dtype=float), (ops.n_elements,))[:, None, None]
    wk = np.broadcast_to(np.asarray(w_stiff, dtype=float), (ops.n_elements,))[:, None, None]
    ye = wm * np.matmul(ops.M, xe)
    ye += wk * np.matmul(ops.K, xe)
    if not multi:
        ye = ye[..., 0]
    y = np.zeros_like(x)
    for elems, dofs in zip(plan.batches, plan.dof_batches):
        y[dofs] += ye[elems]
    return y


def _constrained_product(ops, dt, x):
    plan = plan_for(ops)
    wm, wk = ops.system_weights(dt)
    c = plan.constrained
    xm = x.copy()
    xm[c] = 0.0
    y = ebe_apply(ops, wm, wk, xm)
    y[c] = x[c]
    return y


def ebe_matvec(element_ops, dt, x):
    """Newmark system product ``A x`` without forming A; constrained DOFs pass through."""
    x = check_vector(x, element_ops.n_dofs)
    return _constrained_product(element_ops, dt, x)


def ebe_matvec_multi(element_ops, dt, X):
    """Lane-wise ``A X`` for an (n_dofs, r) multi-vector in one element sweep."""
    X = check_multivector(X, element_ops.n_dofs)
    return _constrained_product(element_ops, dt, X)


def ebe_diagonal_blocks(element_ops, dt):
    """Nodal 3x3 diagonal blocks of the constrained system matrix, from element data."""
    wm, wk = element_ops.system_weights(dt)
    idx = np.arange(10)
    blocks = np.empty((element_ops.n_elements, 10, 3, 3))
    for a in idx:
        s = slice(3 * a, 3 * a + 3)
        blocks[:, a] = (wm[:, None, None] * element_ops.M[:, s, s]
                        + wk[:, None, None] * element_ops.K[:, s, s])
    nodes = element_ops.node_map.ravel()
    out = np.zeros((element_ops.n_nodes, 3, 3))
    np.add.at(out, nodes, blocks.reshape(-1, 3, 3))
    mask = np.zeros(element_ops.n_dofs, dtype=bool)
    mask[element_ops.constrained_dofs] = True
    mask = mask.reshape(-1, 3)
    kill = mask[:, :, None] | mask[:, None, :]
    out[kill] = 0.0
    node, comp = np.nonzero(mask)
    out[node, comp, comp] = 1.0
    return out
