from math import factorial

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hetsolve.elasticity import (TET_BARY, TET_WEIGHTS, Material, build_element_operators,
                                 conical_rule, element_damping, element_mass, element_stiffness,
                                 newmark_coefficients, shape_functions, shape_gradients)
from hetsolve.mesh import EDGE_PAIRS, BoxMeshSpec, generate_box_mesh

STEEL = Material(7800.0, 2.0e11, 0.3, 0.1, 1e-3)


def quadratic_tet(corners):
    corners = np.asarray(corners, dtype=float)
    mids = [(corners[a] + corners[b]) / 2 for a, b in EDGE_PAIRS]
    return np.vstack([corners, mids])


REF = quadratic_tet([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


def monomial_integral(a, b, c):
    """Exact integral of x^a y^b z^c over the unit reference tetrahedron."""
    return factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 3)


def exponents(max_degree):
    return [(a, b, c) for a in range(max_degree + 1) for b in range(max_degree + 1 - a)
            for c in range(max_degree + 1 - a - b)]


def test_material_validation():
    with pytest.raises(ValueError):
        Material(1000.0, 1e9, 0.5)
    with pytest.raises(ValueError):
        Material(-1.0, 1e9, 0.2)
    with pytest.raises(ValueError):
        Material(1000.0, 1e9, 0.2, rayleigh_beta=-1.0)


def test_wave_speed_gives_shear_modulus():
    m = Material.from_wave_speed(1800.0, 200.0, 0.35)
    assert m.lame()[1] == pytest.approx(1800.0 * 200.0**2, rel=1e-14)


def test_elasticity_matrix_uniaxial_strain():
    lam, mu = STEEL.lame()
    stress = STEEL.elasticity_matrix() @ np.array([1e-3, 0, 0, 0, 0, 0])
    assert np.allclose(stress[:3], [(lam + 2 * mu) * 1e-3, lam * 1e-3, lam * 1e-3])


@pytest.mark.parametrize("rule", [(TET_BARY, TET_WEIGHTS), conical_rule(3)])
def test_quadrature_exact_to_degree_five(rule):
    bary, w = rule
    assert w.sum() == pytest.approx(1 / 6, rel=1e-14)
    x, y, z = bary[:, 1], bary[:, 2], bary[:, 3]
    for a, b, c in exponents(5):
        assert np.dot(w, x**a * y**b * z**c) == pytest.approx(monomial_integral(a, b, c),
                                                              rel=1e-13, abs=1e-16)


@given(arrays(float, 4, elements=st.floats(0.01, 1.0)))
def test_shape_functions_partition_of_unity(raw):
    bary = raw / raw.sum()
    assert shape_functions(bary).sum() == pytest.approx(1.0, abs=1e-13)
    assert np.allclose(shape_gradients(bary).sum(axis=1), 0.0, atol=1e-12)


def test_shape_functions_are_nodal():
    bary_nodes = np.vstack([np.eye(4)] + [(np.eye(4)[a] + np.eye(4)[b]) / 2 for a, b in EDGE_PAIRS])
    assert np.allclose(shape_functions(bary_nodes), np.eye(10), atol=1e-14)


def rigid_modes(coords):
    modes = []
    for d in range(3):
        t = np.zeros((10, 3))
        t[:, d] = 1.0
        modes.append(t.ravel())
    for axis in np.eye(3):
        modes.append(np.cross(axis, coords).ravel())
    return np.array(modes).T


@st.composite
def affine_elements(draw):
    A = draw(arrays(float, (3, 3), elements=st.floats(-2, 2)))
    shift = draw(arrays(float, 3, elements=st.floats(-100, 100)))
    A = A + 3 * np.eye(3)
    if np.linalg.det(A) < 0.5:
        A = 3 * np.eye(3)
    return REF @ A.T + shift


@given(affine_elements())
def test_stiffness_symmetric_psd_with_rigid_kernel(coords):
    K = element_stiffness(coords, STEEL)
    scale = np.abs(K).max()
    assert np.allclose(K, K.T, atol=1e-13 * scale)
    R = rigid_modes(coords)
    assert np.abs(K @ R).max() <= 1e-9 * scale * np.abs(R).max()
    ev = np.linalg.eigvalsh(K)
    assert ev.min() >= -1e-9 * ev.max()
    assert np.sum(ev < 1e-9 * ev.max()) == 6


@given(affine_elements(), arrays(float, (3, 3), elements=st.floats(-1e-3, 1e-3)))
def test_linear_field_strain_energy(coords, G):
    """A linear displacement has constant strain, so u^T K u = V eps^T D eps."""
    u = (coords @ G.T).ravel()
    eps_t = 0.5 * (G + G.T)
    eps = np.array([eps_t[0, 0], eps_t[1, 1], eps_t[2, 2],
                    2 * eps_t[1, 2], 2 * eps_t[0, 2], 2 * eps_t[0, 1]])
    c = coords[:4]
    vol = np.linalg.det(c[1:] - c[0]) / 6
    expect = vol * eps @ STEEL.elasticity_matrix() @ eps
    K = element_stiffness(coords, STEEL)
    assert u @ K @ u == pytest.approx(expect, rel=1e-9, abs=1e-12 * np.abs(K).max() * np.abs(u).max()**2)


@given(affine_elements())
def test_mass_total_and_symmetry(coords):
    M = element_mass(coords, STEEL)
    c = coords[:4]
    vol = np.linalg.det(c[1:] - c[0]) / 6
    for d in range(3):
        t = np.zeros(30)
        t[d::3] = 1.0
        assert t @ M @ t == pytest.approx(STEEL.density * vol, rel=1e-12)
    assert np.allclose(M, M.T, atol=0)
    assert np.linalg.eigvalsh(M).min() > 0


def test_independent_rule_agrees():
    coords = REF @ np.array([[2.0, 0.3, 0.1], [0.0, 1.5, 0.2], [0.1, 0.0, 1.2]]).T
    for fn in (element_stiffness, element_mass):
        a = fn(coords, STEEL)
        b = fn(coords, STEEL, rule=conical_rule(4))
        assert np.allclose(a, b, rtol=0, atol=1e-13 * np.abs(a).max())


def test_stacked_matches_single():
    cs = np.stack([REF, REF * 2.0 + 1.0])
    mats = [STEEL, Material(2000.0, 1e9, 0.25)]
    K = element_stiffness(cs, mats)
    assert np.allclose(K[1], element_stiffness(cs[1], mats[1]), rtol=1e-13, atol=0)


def test_degenerate_element_rejected():
    flat = quadratic_tet([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    with pytest.raises(ValueError):
        element_stiffness(flat, STEEL)
    inverted = quadratic_tet([[0, 0, 0], [0, 1, 0], [1, 0, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        element_mass(inverted, STEEL)


def test_damping_and_newmark_weights():
    K, M = element_stiffness(REF, STEEL), element_mass(REF, STEEL)
    assert np.array_equal(element_damping(K, M, STEEL), 0.1 * M + 1e-3 * K)
    assert newmark_coefficients(0.01) == (4 / 0.01**2, 2 / 0.01)


def test_operator_set_system_weights():
    mesh = generate_box_mesh(BoxMeshSpec(2, 2, 1, 1, 1, 1, layer_interface=0.5))
    mats = [Material(2000, 1e9, 0.3, 0.2, 1e-3), Material(1800, 5e8, 0.35, 0.1, 2e-3)]
    ops = build_element_operators(mesh, mats)
    dt = 0.01
    wm, wk = ops.system_weights(dt)
    alpha = np.array([mats[m].rayleigh_alpha for m in mesh.element_material])
    beta = np.array([mats[m].rayleigh_beta for m in mesh.element_material])
    assert np.allclose(wm, 4 / dt**2 + 2 / dt * alpha)
    assert np.allclose(wk, 1 + 2 / dt * beta)
    A = ops.system_operators(dt)
    C = ops.damping()
    assert np.allclose(A, 4 / dt**2 * ops.M + 2 / dt * C + ops.K, rtol=1e-14)
