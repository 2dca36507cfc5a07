"""Element operators for linear dynamic elasticity on 10-node tetrahedra.

Element DOFs are node-major: DOF ``3*a + d`` is component ``d`` of local
node ``a``, matching the global numbering ``3*node + d``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from ._validation import check_positive
from .mesh import EDGE_PAIRS


@dataclass(frozen=True)
class Material:
    density: float
    young_modulus: float
    poisson: float
    rayleigh_alpha: float = 0.0
    rayleigh_beta: float = 0.0

    def __post_init__(self):
        check_positive(self.density, "density")
        check_positive(self.young_modulus, "young_modulus")
        if not 0.0 <= self.poisson < 0.5:
            raise ValueError(f"poisson must lie in [0, 0.5), got {self.poisson!r}")
        check_positive(self.rayleigh_alpha, "rayleigh_alpha", strict=False)
        check_positive(self.rayleigh_beta, "rayleigh_beta", strict=False)

    @classmethod
    def from_wave_speed(cls, density, vs, poisson, rayleigh_alpha=0.0, rayleigh_beta=0.0):
        """Build from shear-wave speed ``vs`` (m/s)."""
        E = 2.0 * density * vs**2 * (1.0 + poisson)
        return cls(density, E, poisson, rayleigh_alpha, rayleigh_beta)

    def lame(self):
        E, nu = self.young_modulus, self.poisson
        lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        mu = E / (2.0 * (1.0 + nu))
        return lam, mu

    def elasticity_matrix(self):
        """Isotropic 6x6 matrix in Voigt order xx, yy, zz, yz, xz, xy."""
        lam, mu = self.lame()
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[np.arange(3), np.arange(3)] += 2.0 * mu
        D[np.arange(3, 6), np.arange(3, 6)] = mu
        return D


# Symmetric 14-point rule on the reference tetrahedron (volume 1/6), exact to degree 5.
def _symmetric_rule():
    a1, w1 = 0.0927352503108912264, 0.0122488405193936582
    a2, w2 = 0.3108859192633006097, 0.0187813209530026417
    b, w3 = 0.4544962958743503, 0.0070910034628469110
    pts, wts = [], []
    for a, w in ((a1, w1), (a2, w2)):
        for k in range(4):
            bary = np.full(4, a)
            bary[k] = 1.0 - 3.0 * a
            pts.append(bary)
            wts.append(w)
    for i, j in EDGE_PAIRS:
        bary = np.full(4, 0.5 - b)
        bary[[i, j]] = b
        pts.append(bary)
        wts.append(w3)
    return np.array(pts), np.array(wts)


TET_BARY, TET_WEIGHTS = _symmetric_rule()


def conical_rule(n):
    """Collapsed-coordinate Gauss product rule with ``n**3`` points, exact to degree 2n-1.

    Returns barycentric points (n**3, 4) and weights summing to 1/6.
    """
    xa, wa = roots_jacobi(n, 2.0, 0.0)
    xb, wb = roots_jacobi(n, 1.0, 0.0)
    xc, wc = roots_legendre(n)
    a, b, c = (xa + 1) / 2, (xb + 1) / 2, (xc + 1) / 2
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = np.einsum("i,j,k->ijk", wa / 8, wb / 4, wc / 2)
    xi = A
    eta = (1 - A) * B
    zeta = (1 - A) * (1 - B) * C
    lam = np.column_stack([xi.ravel(), eta.ravel(), zeta.ravel()])
    bary = np.column_stack([1.0 - lam.sum(axis=1), lam])
    return bary, W.ravel()


def shape_functions(bary):
    """Quadratic tetrahedron shape values at barycentric points, shape (q, 10)."""
    L = np.atleast_2d(bary)
    corner = L * (2.0 * L - 1.0)
    edge = 4.0 * L[:, EDGE_PAIRS[:, 0]] * L[:, EDGE_PAIRS[:, 1]]
    return np.hstack([corner, edge])


def shape_gradients(bary):
    """Derivatives w.r.t. reference coordinates (L1, L2, L3), shape (q, 10, 3)."""
    L = np.atleast_2d(bary)
    q = L.shape[0]
    # dL/d(xi_k): L0 = 1 - sum, Lk = xi_k
    dL = np.array([[-1.0, -1.0, -1.0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    out = np.empty((q, 10, 3))
    out[:, :4, :] = (4.0 * L - 1.0)[:, :, None] * dL[None]
    i, j = EDGE_PAIRS[:, 0], EDGE_PAIRS[:, 1]
    out[:, 4:, :] = 4.0 * (L[:, j, None] * dL[i][None] + L[:, i, None] * dL[j][None])
    return out


def _jacobians(coords, dN):
    coords = np.asarray(coords, dtype=float)
    J = np.einsum("...ai,qaj->...qij", coords, dN)
    detJ = np.linalg.det(J)
    return J, detJ


def _check_volume(coords):
    c = np.asarray(coords, dtype=float)[..., :4, :]
    d = c[..., 1:, :] - c[..., :1, :]
    vol = np.linalg.det(d) / 6.0
    scale = np.max(np.abs(d), axis=(-1, -2)) ** 3
    if np.any(vol <= 1e-12 * scale):
        raise ValueError("degenerate or inverted element (corner volume <= 0)")
    return vol


def _strain_matrix(G):
    """B matrices (..., 6, 30) from physical gradients G (..., 10, 3)."""
    B = np.zeros(G.shape[:-2] + (6, 30))
    gx, gy, gz = G[..., 0], G[..., 1], G[..., 2]
    B[..., 0, 0::3] = gx
    B[..., 1, 1::3] = gy
    B[..., 2, 2::3] = gz
    B[..., 3, 1::3] = gz
    B[..., 3, 2::3] = gy
    B[..., 4, 0::3] = gz
    B[..., 4, 2::3] = gx
    B[..., 5, 0::3] = gy
    B[..., 5, 1::3] = gx
    return B


def element_stiffness(coords, mat, rule=None):
    """Stiffness matrix (30x30) for one element, or (n, 30, 30) for stacked coords.

    ``mat`` may be a single :class:`Material` or a sequence aligned with the
    stacked elements.
    """
    bary, w = rule if rule is not None else (TET_BARY, TET_WEIGHTS)
    _check_volume(coords)
    dN = shape_gradients(bary)
    J, detJ = _jacobians(coords, dN)
    if np.any(detJ <= 0):
        raise ValueError("non-positive Jacobian at a quadrature point")
    G = np.matmul(dN, np.linalg.inv(J))
    B = _strain_matrix(G)
    D = _material_array(mat, np.shape(coords)[:-2], "elasticity_matrix")
    DB = np.matmul(D[..., None, :, :], B) * (w * detJ)[..., None, None]
    nq = w.size
    lead = B.shape[:-3]
    Bf = B.reshape(lead + (nq * 6, 30))
    K = np.matmul(np.swapaxes(Bf, -1, -2), DB.reshape(lead + (nq * 6, 30)))
    return 0.5 * (K + np.swapaxes(K, -1, -2))


def element_mass(coords, mat, rule=None):
    """Consistent mass matrix (30x30), stacked like :func:`element_stiffness`."""
    bary, w = rule if rule is not None else (TET_BARY, TET_WEIGHTS)
    _check_volume(coords)
    N = shape_functions(bary)
    _, detJ = _jacobians(coords, shape_gradients(bary))
    rho = _material_array(mat, np.shape(coords)[:-2], "density")
    Ms = np.matmul(N.T * (w * detJ)[..., None, :], N) * rho[..., None, None]
    M = np.zeros(Ms.shape[:-2] + (30, 30))
    for d in range(3):
        M[..., d::3, d::3] = Ms
    return M


def _material_array(mat, batch_shape, attr):
    if isinstance(mat, Material):
        value = getattr(mat, attr)
        return value() if callable(value) else np.asarray(value, dtype=float)
    values = [getattr(m, attr) for m in mat]
    values = [v() if callable(v) else v for v in values]
    arr = np.asarray(values, dtype=float)
    if arr.shape[0] != (batch_shape[0] if batch_shape else 1):
        raise ValueError("material sequence does not match element count")
    return arr


def element_damping(K_e, M_e, mat):
    """Rayleigh damping ``alpha*M + beta*K``."""
    return mat.rayleigh_alpha * M_e + mat.rayleigh_beta * K_e


def newmark_coefficients(dt):
    """Average-acceleration Newmark weights on (M, C) in the system matrix."""
    check_positive(dt, "dt")
    return 4.0 / dt**2, 2.0 / dt


def element_system_operator(K_e, M_e, C_e, dt):
    cm, cc = newmark_coefficients(dt)
    return cm * M_e + cc * C_e + K_e


@dataclass
class ElementOperatorSet:
    """Per-element stiffness and mass plus the element-to-node map.

    Damping is never stored; per-element Rayleigh weights ``alpha`` and
    ``beta`` let callers form ``C_e`` or the full system operator on demand.
    """

    K: np.ndarray
    M: np.ndarray
    node_map: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    n_nodes: int
    constrained_dofs: np.ndarray

    @property
    def n_elements(self):
        return self.node_map.shape[0]

    @property
    def n_dofs(self):
        return 3 * self.n_nodes

    @property
    def dof_map(self):
        return (3 * self.node_map[:, :, None] + np.arange(3)).reshape(-1, 30)

    def damping(self):
        return self.alpha[:, None, None] * self.M + self.beta[:, None, None] * self.K

    def system_weights(self, dt):
        """Per-element weights (w_M, w_K) with A_e = w_M*M_e + w_K*K_e."""
        cm, cc = newmark_coefficients(dt)
        return cm + cc * self.alpha, 1.0 + cc * self.beta

    def system_operators(self, dt):
        wm, wk = self.system_weights(dt)
        return wm[:, None, None] * self.M + wk[:, None, None] * self.K


def build_element_operators(mesh, materials, constrained_dofs=None, chunk=4096):
    """Compute K_e and M_e for every element of ``mesh``.

    ``materials`` is indexed by the mesh's material ids. Bottom DOFs are
    constrained unless ``constrained_dofs`` is given.
    """
    materials = list(materials)
    if mesh.element_material.max() >= len(materials):
        raise ValueError("mesh references a material id with no Material entry")
    n_el = mesh.n_elements
    K = np.empty((n_el, 30, 30))
    M = np.empty((n_el, 30, 30))
    for start in range(0, n_el, chunk):
        sl = slice(start, min(start + chunk, n_el))
        coords = mesh.node_coords[mesh.elements[sl]]
        mats = [materials[m] for m in mesh.element_material[sl]]
        K[sl] = element_stiffness(coords, mats)
        M[sl] = element_mass(coords, mats)
    ids = mesh.element_material
    alpha = np.array([m.rayleigh_alpha for m in materials])[ids]
    beta = np.array([m.rayleigh_beta for m in materials])[ids]
    if constrained_dofs is None:
        constrained_dofs = mesh.constrained_dofs()
    return ElementOperatorSet(K, M, mesh.elements.copy(), alpha, beta, mesh.n_nodes,
                              np.asarray(constrained_dofs, dtype=np.int64))
