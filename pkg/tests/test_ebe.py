import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetsolve.ebe import (ebe_apply, ebe_diagonal_blocks, ebe_matvec, ebe_matvec_multi,
                          greedy_coloring, plan_for)
from hetsolve.sparse import assemble_system, bsr_matvec

DT = 0.005


@pytest.fixture(scope="module")
def crs(small_problem):
    return assemble_system(small_problem.mesh, small_problem.ops, DT)


def rel_err(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def test_coloring_separates_shared_nodes(small_problem):
    node_map = small_problem.ops.node_map
    colors = greedy_coloring(node_map)
    for c in np.unique(colors):
        nodes = node_map[colors == c].ravel()
        assert np.unique(nodes).size == nodes.size


def test_plan_covers_every_element_once(small_problem):
    plan = plan_for(small_problem.ops)
    allel = np.concatenate(plan.batches)
    assert np.array_equal(np.sort(allel), np.arange(small_problem.ops.n_elements))


@given(st.integers(0, 2**32 - 1))
def test_matvec_matches_assembled(small_problem, crs, seed):
    x = np.random.default_rng(seed).standard_normal(small_problem.n_dofs)
    assert rel_err(ebe_matvec(small_problem.ops, DT, x), bsr_matvec(crs, x)) < 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_multi_matches_columns(small_problem, crs, seed, r):
    X = np.random.default_rng(seed).standard_normal((small_problem.n_dofs, r))
    Y = ebe_matvec_multi(small_problem.ops, DT, X)
    assert Y.shape == X.shape and Y.flags.c_contiguous
    assert rel_err(Y, bsr_matvec(crs, X)) < 1e-12
    for k in range(r):
        single = ebe_matvec(small_problem.ops, DT, np.ascontiguousarray(X[:, k]))
        assert rel_err(Y[:, k], single) < 1e-13


def test_single_lane_multi_is_bitwise_single(small_problem, rng):
    x = rng.standard_normal(small_problem.n_dofs)
    a = ebe_matvec(small_problem.ops, DT, x)
    b = ebe_matvec_multi(small_problem.ops, DT, x[:, None])[:, 0]
    assert np.array_equal(a, b)


def test_constrained_dofs_pass_through(small_problem, rng):
    c = small_problem.ops.constrained_dofs
    x = rng.standard_normal(small_problem.n_dofs)
    y = ebe_matvec(small_problem.ops, DT, x)
    assert np.array_equal(y[c], x[c])
    x2 = x.copy()
    x2[c] = rng.standard_normal(c.size)
    free = np.setdiff1d(np.arange(x.size), c)
    assert np.array_equal(ebe_matvec(small_problem.ops, DT, x2)[free], y[free])


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_linearity(small_problem, a, b):
    rng = np.random.default_rng(0)
    x, z = rng.standard_normal((2, small_problem.n_dofs))
    lhs = ebe_matvec(small_problem.ops, DT, a * x + b * z)
    rhs = a * ebe_matvec(small_problem.ops, DT, x) + b * ebe_matvec(small_problem.ops, DT, z)
    scale = np.abs(ebe_matvec(small_problem.ops, DT, x)).max() * (abs(a) + abs(b) + 1)
    assert np.abs(lhs - rhs).max() <= 1e-12 * scale


def test_mass_only_weights(small_problem, rng):
    ops = small_problem.ops
    x = rng.standard_normal(ops.n_dofs)
    y = ebe_apply(ops, 1.0, 0.0, x)
    ref = np.zeros_like(x)
    for e in range(ops.n_elements):
        d = ops.dof_map[e]
        ref[d] += ops.M[e] @ x[d]
    assert rel_err(y, ref) < 1e-13


def test_diagonal_blocks_match_assembled(small_problem, crs):
    blocks = ebe_diagonal_blocks(small_problem.ops, DT)
    ref = crs.diagonal_blocks()
    assert np.abs(blocks - ref).max() <= 1e-13 * np.abs(ref).max()


def test_rejects_wrong_shapes(small_problem):
    with pytest.raises(ValueError):
        ebe_matvec(small_problem.ops, DT, np.zeros(5))
    with pytest.raises(ValueError):
        ebe_matvec_multi(small_problem.ops, DT, np.zeros(small_problem.n_dofs))
