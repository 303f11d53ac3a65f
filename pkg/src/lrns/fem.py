"""Bilinear (Q1) finite elements on a structured grid of the unit square.

Nodes are numbered row-major, ``node(i, j) = j * (n + 1) + i`` at
``(i h, j h)``. Every cell is the same square, so the reference-element
tables below are computed once and all element matrices are formed in one
vectorized contraction. Integrals use the tensor 3x3 Gauss rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

# 3-point Gauss-Legendre on [0, 1]
_G1 = np.array([0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0])
_W1 = np.array([5.0, 8.0, 5.0]) / 18.0

# local node order (counter-clockwise): (0,0), (1,0), (1,1), (0,1)
_CORNERS = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def _reference_tables():
    qx, qy = np.meshgrid(_G1, _G1, indexing="xy")
    pts = np.column_stack([qx.ravel(), qy.ravel()])  # (9, 2)
    wts = np.outer(_W1, _W1).ravel()
    sx = 2.0 * _CORNERS[:, 0] - 1.0  # +-1 pattern
    sy = 2.0 * _CORNERS[:, 1] - 1.0
    fx = np.where(sx[None, :] > 0, pts[:, :1], 1.0 - pts[:, :1])  # (9, 4)
    fy = np.where(sy[None, :] > 0, pts[:, 1:], 1.0 - pts[:, 1:])
    phi = fx * fy
    dphi = np.stack([sx[None, :] * fy, sy[None, :] * fx], axis=-1)  # (9, 4, 2)
    return pts, wts, phi, dphi


_QPTS, _QWTS, _PHI, _DPHI = _reference_tables()
_MASS_Q = np.einsum("qi,qj->qij", _PHI, _PHI)
_STIFF_Q = np.einsum("qid,qjd->qij", _DPHI, _DPHI)


@dataclass(frozen=True)
class StructuredMesh:
    n: int
    h: float
    nodes: np.ndarray  # ((n+1)^2, 2)
    cells: np.ndarray  # (n^2, 4), counter-clockwise

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    def quadrature_points(self) -> np.ndarray:
        """Physical quadrature points, shape ``(cells, 9, 2)``."""
        origin = self.nodes[self.cells[:, 0]]
        return origin[:, None, :] + self.h * _QPTS[None, :, :]


@dataclass(frozen=True)
class DofMap:
    interior: np.ndarray
    boundary: np.ndarray
    total: int

    @property
    def num_interior(self) -> int:
        return len(self.interior)


def build_mesh(n: int) -> StructuredMesh:
    if int(n) != n or n < 1:
        raise ValueError(f"cells per side must be a positive integer, got {n}")
    n = int(n)
    h = 1.0 / n
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    nodes = np.column_stack([ii.ravel() / n, jj.ravel() / n])
    ci, cj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    base = (cj * (n + 1) + ci).ravel()
    cells = np.column_stack([base, base + 1, base + n + 2, base + n + 1])
    return StructuredMesh(n, h, nodes, cells)


def dof_map(mesh: StructuredMesh) -> DofMap:
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    on_bnd = (x == 0.0) | (x == 1.0) | (y == 0.0) | (y == 1.0)
    return DofMap(np.flatnonzero(~on_bnd), np.flatnonzero(on_bnd), mesh.num_nodes)


def _coefficient_at_quadrature(mesh: StructuredMesh, coefficient) -> np.ndarray:
    """Coefficient values ``(cells, 9)``; nodal fields are interpolated bilinearly."""
    if coefficient is None:
        return np.ones((len(mesh.cells), 9))
    if callable(coefficient):
        q = mesh.quadrature_points()
        vals = np.asarray(coefficient(q[..., 0], q[..., 1]), dtype=float)
        return np.broadcast_to(vals, q.shape[:2]).copy()
    field = np.asarray(coefficient, dtype=float)
    if field.ndim == 0:
        return np.full((len(mesh.cells), 9), float(field))
    if field.shape != (mesh.num_nodes,):
        raise ValueError(f"nodal field has shape {field.shape}, expected ({mesh.num_nodes},)")
    return field[mesh.cells] @ _PHI.T


def _pattern(mesh: StructuredMesh):
    rows = np.repeat(mesh.cells, 4, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, 4)).ravel()
    return rows, cols


def _assemble(mesh: StructuredMesh, local: np.ndarray) -> sp.csr_matrix:
    rows, cols = _pattern(mesh)
    n = mesh.num_nodes
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def element_mass(mesh: StructuredMesh, coefficient=None) -> np.ndarray:
    a = _coefficient_at_quadrature(mesh, coefficient) * _QWTS
    return mesh.h ** 2 * np.einsum("cq,qij->cij", a, _MASS_Q)


def element_stiffness(mesh: StructuredMesh, coefficient=None) -> np.ndarray:
    # (1/h)^2 from the gradients cancels the h^2 area factor
    a = _coefficient_at_quadrature(mesh, coefficient) * _QWTS
    return np.einsum("cq,qij->cij", a, _STIFF_Q)


def assemble_mass(mesh: StructuredMesh) -> sp.csr_matrix:
    """Consistent mass matrix ``G_ij = int phi_i phi_j``."""
    return _assemble(mesh, element_mass(mesh))


def assemble_stiffness(mesh: StructuredMesh, coefficient=None) -> sp.csr_matrix:
    """``A_ij = int a grad phi_i . grad phi_j``.

    Parameters
    ----------
    coefficient : None, scalar, nodal array or callable ``a(x, y)``
        None means ``a = 1``. Nodal arrays are interpolated bilinearly to
        the quadrature points. Sign-indefinite fields are allowed.
    """
    return _assemble(mesh, element_stiffness(mesh, coefficient))


def assemble_stiffness_family(mesh: StructuredMesh, fields: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    """Stiffness matrices of several nodal fields on one shared sparsity pattern.

    Returns the pattern (assembled for ``a = 1``) and a ``(len(fields), nnz)``
    array of data vectors aligned with ``pattern.data``; a linear combination
    of the fields is then a linear combination of the data rows.
    """
    # the CSR structure depends only on the connectivity, never on values
    pattern = assemble_stiffness(mesh)
    fields = np.atleast_2d(np.asarray(fields, dtype=float))
    data = np.empty((len(fields), pattern.nnz))
    for t, field in enumerate(fields):
        mat = assemble_stiffness(mesh, field)
        assert np.array_equal(mat.indices, pattern.indices)
        data[t] = mat.data
    return pattern, data


def block_slots(pattern: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sub-block structure of ``pattern`` and, per stored entry, its slot in ``pattern.data``.

    ``with_data(block, data[..., slots])`` then extracts the same block from
    any matrix sharing the pattern without re-slicing it.
    """
    tagged = with_data(pattern, np.arange(1, pattern.nnz + 1, dtype=float))
    block = tagged[rows][:, cols].tocsr()
    block.sort_indices()
    slots = block.data.astype(np.int64) - 1
    return block, slots


def with_data(pattern: sp.csr_matrix, data: np.ndarray) -> sp.csr_matrix:
    out = pattern.copy()
    out.data = np.asarray(data, dtype=float).copy()
    return out


def assemble_load(mesh: StructuredMesh, f: Callable | float, t: float = 0.0) -> np.ndarray:
    """``b_i = int f(., t) phi_i``; ``f`` is a constant or ``f(x, y, t)``."""
    q = mesh.quadrature_points()
    if callable(f):
        vals = np.broadcast_to(np.asarray(f(q[..., 0], q[..., 1], t), dtype=float), q.shape[:2])
    else:
        vals = np.full(q.shape[:2], float(f))
    local = mesh.h ** 2 * (vals * _QWTS) @ _PHI  # (cells, 4)
    b = np.zeros(mesh.num_nodes)
    np.add.at(b, mesh.cells.ravel(), local.ravel())
    return b


def interpolate(mesh: StructuredMesh, fn: Callable, *args) -> np.ndarray:
    """Nodal interpolation ``fn(x_i, y_i, *args)``."""
    vals = fn(mesh.nodes[:, 0], mesh.nodes[:, 1], *args)
    return np.broadcast_to(np.asarray(vals, dtype=float), (mesh.num_nodes,)).copy()


def interior_block(mat, dofs: DofMap) -> sp.csr_matrix:
    mat = sp.csr_matrix(mat)
    if mat.shape != (dofs.total, dofs.total):
        raise ValueError(f"matrix shape {mat.shape} does not match {dofs.total} nodes")
    return mat[dofs.interior][:, dofs.interior].tocsr()


def coupling_block(mat, dofs: DofMap) -> sp.csr_matrix:
    mat = sp.csr_matrix(mat)
    if mat.shape != (dofs.total, dofs.total):
        raise ValueError(f"matrix shape {mat.shape} does not match {dofs.total} nodes")
    return mat[dofs.interior][:, dofs.boundary].tocsr()


def restrict_dirichlet(mat, load: np.ndarray, dofs: DofMap, g_boundary: np.ndarray | None = None):
    """Interior system ``(A_II, b_I - A_IB g_B)``.

    With ``g_boundary`` omitted or zero this is plain row/column deletion, so
    the restriction is linear in the matrix and commutes with the
    mean/perturbation split.
    """
    load = np.asarray(load, dtype=float)
    if load.shape != (dofs.total,):
        raise ValueError(f"load has shape {load.shape}, expected ({dofs.total},)")
    a_ii = interior_block(mat, dofs)
    rhs = load[dofs.interior].copy()
    if g_boundary is not None:
        g_boundary = np.asarray(g_boundary, dtype=float)
        if g_boundary.shape != (len(dofs.boundary),):
            raise ValueError("boundary values do not match the boundary node count")
        rhs -= coupling_block(mat, dofs) @ g_boundary
    return a_ii, rhs


def extend(u_interior: np.ndarray, dofs: DofMap, g_boundary: np.ndarray | None = None) -> np.ndarray:
    """Full nodal vector from interior values and boundary data (zero if omitted)."""
    out = np.zeros(u_interior.shape[:-1] + (dofs.total,))
    out[..., dofs.interior] = u_interior
    if g_boundary is not None:
        out[..., dofs.boundary] = g_boundary
    return out


def write_nodal_csv(path, mesh: StructuredMesh, values: np.ndarray) -> None:
    """One row per node in row-major order: ``x, y, value``."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.num_nodes,):
        raise ValueError("nodal field does not match the mesh")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for (x, y), v in zip(mesh.nodes, values):
            w.writerow([f"{x:.17g}", f"{y:.17g}", f"{v:.17g}"])
