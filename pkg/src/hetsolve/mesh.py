"""Structured layered-box meshes of 10-node tetrahedra.

Each hexahedral cell is split into six tetrahedra sharing the cell's main
diagonal (Kuhn split). All cells use the same split, so neighbouring faces
carry matching diagonals and the mesh is conforming.

Local node ordering of a 10-node element: corners 0-3, then the midpoints
of edges (0,1), (1,2), (0,2), (0,3), (1,3), (2,3).
"""

from dataclasses import dataclass, field
from itertools import permutations
from typing import Callable, Union

import numpy as np

from ._validation import check_int, check_positive

EDGE_PAIRS = np.array([[0, 1], [1, 2], [0, 2], [0, 3], [1, 3], [2, 3]])

Interface = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class BoxMeshSpec:
    """Box ``[0, extent_x] x [0, extent_y] x [0, extent_z]`` with one layer interface.

    ``layer_interface`` is either a constant depth or a vectorised function
    ``h(x, y)``; elements whose centroid lies below it get material 0
    (bedrock), the others material 1 (sediment).
    """

    extent_x: float
    extent_y: float
    extent_z: float
    div_x: int
    div_y: int
    div_z: int
    layer_interface: Interface = 0.0

    def __post_init__(self):
        for name in ("extent_x", "extent_y", "extent_z"):
            check_positive(getattr(self, name), name)
        for name in ("div_x", "div_y", "div_z"):
            check_int(getattr(self, name), name, minimum=1)

    def interface_depth(self, x, y):
        h = self.layer_interface
        if callable(h):
            z = np.asarray(h(np.asarray(x), np.asarray(y)), dtype=float)
            return np.broadcast_to(z, np.shape(x))
        return np.full(np.shape(x), float(h))


@dataclass
class Mesh:
    node_coords: np.ndarray
    elements: np.ndarray
    element_material: np.ndarray
    bottom_nodes: np.ndarray
    surface_nodes: np.ndarray
    n_corner_nodes: int
    spec: BoxMeshSpec = field(repr=False, default=None)

    @property
    def n_nodes(self):
        return self.node_coords.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def n_dofs(self):
        return 3 * self.n_nodes

    def element_coords(self):
        """Node coordinates gathered per element, shape (n_elements, 10, 3)."""
        return self.node_coords[self.elements]

    def corner_volumes(self):
        c = self.node_coords[self.elements[:, :4]]
        d = c[:, 1:] - c[:, :1]
        return np.linalg.det(d) / 6.0

    def constrained_dofs(self):
        """DOF indices fixed by the bottom boundary (all three components)."""
        return np.sort((3 * self.bottom_nodes[:, None] + np.arange(3)).ravel())


def _kuhn_tets():
    """Six corner-index tetrahedra of the unit cube, all positively oriented."""
    unit = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
                     [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]])
    lookup = {tuple(p): i for i, p in enumerate(unit)}
    tets = []
    for perm in permutations(range(3)):
        v = np.zeros(3, dtype=int)
        path = [lookup[tuple(v)]]
        for axis in perm:
            v[axis] = 1
            path.append(lookup[tuple(v)])
        if np.linalg.det(unit[path[1:]] - unit[path[0]]) < 0:
            path[1], path[2] = path[2], path[1]
        tets.append(path)
    return unit, np.array(tets)


def generate_box_mesh(spec: BoxMeshSpec) -> Mesh:
    nx, ny, nz = spec.div_x, spec.div_y, spec.div_z
    xs = np.linspace(0.0, spec.extent_x, nx + 1)
    ys = np.linspace(0.0, spec.extent_y, ny + 1)
    zs = np.linspace(0.0, spec.extent_z, nz + 1)
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    corners = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])
    n_corner = corners.shape[0]

    def corner_id(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    unit, tets = _kuhn_tets()
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    cell_corners = np.stack(
        [corner_id(i + o[0], j + o[1], k + o[2]) for o in unit], axis=1)
    corner_conn = cell_corners[:, tets].reshape(-1, 4)

    # one midpoint node per geometric edge, numbered in sorted (min, max) order
    edges = corner_conn[:, EDGE_PAIRS]
    edges = np.sort(edges, axis=2).reshape(-1, 2)
    keys, inverse = np.unique(edges[:, 0] * n_corner + edges[:, 1], return_inverse=True)
    unique_edges = np.column_stack([keys // n_corner, keys % n_corner])
    mid_ids = n_corner + inverse.reshape(-1, 6)
    midpoints = 0.5 * (corners[unique_edges[:, 0]] + corners[unique_edges[:, 1]])

    coords = np.vstack([corners, midpoints])
    elements = np.hstack([corner_conn, mid_ids]).astype(np.int64)

    centroid = corners[corner_conn].mean(axis=1)
    h = spec.interface_depth(centroid[:, 0], centroid[:, 1])
    if np.any(h < 0) or np.any(h > spec.extent_z):
        raise ValueError("layer interface leaves [0, extent_z] inside the box")
    material = np.where(centroid[:, 2] < h, 0, 1).astype(np.int64)

    tol = 1e-9 * spec.extent_z
    bottom = np.flatnonzero(coords[:, 2] < tol)
    surface = np.flatnonzero(coords[:, 2] > spec.extent_z - tol)
    return Mesh(coords, elements, material, bottom, surface, n_corner, spec)


def partition_predictor_regions(mesh, target_block_size):
    """Split all nodes into spatially contiguous blocks of about ``target_block_size``.

    Nodes are ordered lexicographically by (z, y, x) and cut into consecutive
    chunks; a short trailing chunk is merged into its predecessor.
    """
    target_block_size = check_int(target_block_size, "target_block_size", minimum=1)
    c = mesh.node_coords
    order = np.lexsort((c[:, 0], c[:, 1], c[:, 2]))
    n = order.size
    cuts = list(range(0, n, target_block_size)) + [n]
    if len(cuts) > 2 and cuts[-1] - cuts[-2] < target_block_size / 2:
        del cuts[-2]
    return [np.sort(order[a:b]) for a, b in zip(cuts[:-1], cuts[1:])]


def write_mesh_text(mesh, path):
    """Plain-text dump: ``n_nodes n_elements`` header, node rows, element rows.

    Node rows are ``x y z``; element rows are ``material n0 ... n9``.
    """
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_nodes} {mesh.n_elements}\n")
        np.savetxt(fh, mesh.node_coords, fmt="%.17g")
        rows = np.column_stack([mesh.element_material, mesh.elements])
        np.savetxt(fh, rows, fmt="%d")


def read_mesh_text(path):
    """Inverse of :func:`write_mesh_text`; returns (coords, elements, material)."""
    with open(path) as fh:
        n_nodes, n_el = (int(t) for t in fh.readline().split())
        coords = np.loadtxt(fh, max_rows=n_nodes, ndmin=2)
        rows = np.loadtxt(fh, max_rows=n_el, dtype=np.int64, ndmin=2)
    return coords, rows[:, 1:], rows[:, 0]
