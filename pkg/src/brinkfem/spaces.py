"""Degree-of-freedom maps and fields for the Taylor-Hood pair and controls.

Scalar degree-2 nodes are numbered vertices first, then edge midpoints, so
the counts are V for degree-1 spaces and V+E for degree-2 spaces. Vector
fields interleave components per scalar node: node ``s`` owns dofs
``(2s, 2s+1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VECTOR_P2 = "vector_p2"
SCALAR_P1 = "scalar_p1"
CELL_P0 = "cell_p0"
NODAL_P1 = "nodal_p1"

_FAMILIES = (VECTOR_P2, SCALAR_P1, CELL_P0, NODAL_P1)


class DofMap:
    """Local-to-global dof tables for one function space on one mesh."""

    def __init__(self, mesh, family):
        if family not in _FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        self.mesh = mesh
        self.family = family
        V, E, T = mesh.num_vertices, mesh.num_edges, mesh.num_triangles
        if family == VECTOR_P2:
            scalar_nodes = np.concatenate(
                [mesh.triangles, V + mesh.tri_edges], axis=1)   # (T, 6)
            self.cell_scalar_nodes = scalar_nodes
            self.cell_dofs = np.empty((T, 12), dtype=np.int64)
            self.cell_dofs[:, 0::2] = 2 * scalar_nodes
            self.cell_dofs[:, 1::2] = 2 * scalar_nodes + 1
            self.ndof = 2 * (V + E)
        elif family in (SCALAR_P1, NODAL_P1):
            self.cell_dofs = mesh.triangles.copy()
            self.ndof = V
        else:
            self.cell_dofs = np.arange(T, dtype=np.int64)[:, None]
            self.ndof = T
        self.cell_dofs.setflags(write=False)

    def node_coordinates(self):
        """Geometric location of each scalar node (dof for scalar families)."""
        mesh = self.mesh
        if self.family == VECTOR_P2:
            mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]]
                          + mesh.vertices[mesh.edges[:, 1]])
            return np.concatenate([mesh.vertices, mids])
        if self.family == CELL_P0:
            return mesh.centroids()
        return mesh.vertices

    def dirichlet_dofs(self, markers):
        """Dofs whose node lies on a boundary edge with one of the markers."""
        if self.family == CELL_P0:
            return np.empty(0, dtype=np.int64)
        mesh = self.mesh
        markers = set(int(m) for m in markers)
        sel = np.array([m in markers for m in mesh.edge_markers], dtype=bool)
        sel &= mesh.boundary_edge_mask
        edge_ids = np.nonzero(sel)[0]
        vertex_nodes = np.unique(mesh.edges[edge_ids])
        if self.family in (SCALAR_P1, NODAL_P1):
            return vertex_nodes
        scalar = np.concatenate([vertex_nodes, mesh.num_vertices + edge_ids])
        return np.sort(np.concatenate([2 * scalar, 2 * scalar + 1]))


def build_dofmap(mesh, family):
    return DofMap(mesh, family)


@dataclass
class Field:
    """Coefficient vector over a DofMap. Treated as immutable after creation."""
    dofmap: DofMap
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.dofmap.ndof,):
            raise ValueError(
                f"coefficient length {self.values.shape} does not match "
                f"dof count {self.dofmap.ndof}")

    def copy_with(self, values):
        return Field(self.dofmap, values)


class ImplicitControl:
    """Control defined pointwise by clamping gamma0 + (u . v)/alpha.

    Stores no coefficients; consumers evaluate it at quadrature points
    through the closed-over state and adjoint velocity fields.
    """

    scheme = "semi"

    def __init__(self, u, v, gamma0, alpha, lo, hi):
        self.u = u
        self.v = v
        self.gamma0 = gamma0
        self.alpha = float(alpha)
        self.lo = float(lo)
        self.hi = float(hi)


def zero_field(mesh_or_dofmap, family=None):
    dofmap = (mesh_or_dofmap if isinstance(mesh_or_dofmap, DofMap)
              else DofMap(mesh_or_dofmap, family))
    return Field(dofmap, np.zeros(dofmap.ndof))


def interpolate_nodal(dofmap, fn):
    """Nodal (Lagrange) interpolation of a callable fn(x, y)."""
    xy = dofmap.node_coordinates()
    vals = np.asarray(fn(xy[:, 0], xy[:, 1]), dtype=np.float64)
    if dofmap.family == VECTOR_P2:
        if vals.shape == (2, len(xy)):
            vals = vals.T
        if vals.shape != (len(xy), 2):
            raise ValueError("vector interpolation needs fn returning (N, 2)")
        out = np.empty(dofmap.ndof)
        out[0::2] = vals[:, 0]
        out[1::2] = vals[:, 1]
        return Field(dofmap, out)
    return Field(dofmap, vals)


def project_box(x, lo, hi):
    """Pointwise clamp onto [lo, hi]."""
    return np.minimum(hi, np.maximum(x, lo))


def project_p0(ctx, source):
    """L2-orthogonal projection onto cellwise constants (elementwise means).

    source may be a callable of (x, y), a Field over the same mesh, or an
    array of values at the context quadrature points.
    """
    if isinstance(source, Field):
        fam = source.dofmap.family
        if fam == CELL_P0:
            vals = source.values[:, None] * np.ones(ctx.rule.npoints)
        elif fam in (SCALAR_P1, NODAL_P1):
            vals = np.einsum("qn,en->eq", ctx.P1V,
                             source.values[source.dofmap.cell_dofs])
        else:
            raise ValueError(f"cannot project family {fam}")
    elif callable(source):
        x, y = ctx.qp[:, :, 0], ctx.qp[:, :, 1]
        vals = np.broadcast_to(np.asarray(source(x, y), dtype=float), x.shape)
    else:
        vals = np.asarray(source, dtype=float)
    means = (ctx.W * vals).sum(axis=1) / ctx.mesh.areas
    return Field(DofMap(ctx.mesh, CELL_P0), means)


# -- pointwise evaluation (reference-element basis) ----------------------------

_GRAD_BARY = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def p1_reference(bary):
    """P1 basis values (nq, 3) and reference gradients (3, 2)."""
    bary = np.atleast_2d(bary)
    return bary.copy(), _GRAD_BARY.copy()


def p2_reference(bary):
    """P2 basis values (nq, 6), reference gradients (nq, 6, 2), Hessians (6, 2, 2).

    Node order: three vertices, then the midpoint opposite each vertex.
    """
    bary = np.atleast_2d(bary)
    nq = len(bary)
    vals = np.empty((nq, 6))
    grads = np.empty((nq, 6, 2))
    hess = np.empty((6, 2, 2))
    for i in range(3):
        li = bary[:, i]
        gi = _GRAD_BARY[i]
        vals[:, i] = li * (2.0 * li - 1.0)
        grads[:, i] = (4.0 * li - 1.0)[:, None] * gi
        hess[i] = 4.0 * np.outer(gi, gi)
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        la, lb = bary[:, a], bary[:, b]
        ga, gb = _GRAD_BARY[a], _GRAD_BARY[b]
        vals[:, 3 + k] = 4.0 * la * lb
        grads[:, 3 + k] = 4.0 * (lb[:, None] * ga + la[:, None] * gb)
        hess[3 + k] = 4.0 * (np.outer(ga, gb) + np.outer(gb, ga))
    return vals, grads, hess


def evaluate(field, triangle, bary):
    """Evaluate a field and its physical gradient at one barycentric point."""
    mesh = field.dofmap.mesh
    bary = np.asarray(bary, dtype=float).reshape(1, 3)
    p = mesh.vertices[mesh.triangles[triangle]]
    J = np.stack([p[1] - p[0], p[2] - p[0]], axis=1)
    invJT = np.linalg.inv(J).T

    fam = field.dofmap.family
    if fam == CELL_P0:
        return float(field.values[triangle]), np.zeros(2)
    if fam in (SCALAR_P1, NODAL_P1):
        vals, gref = p1_reference(bary)
        coeff = field.values[field.dofmap.cell_dofs[triangle]]
        value = float(vals[0] @ coeff)
        grad = invJT @ (gref.T @ coeff)
        return value, grad
    vals, gref, _ = p2_reference(bary)
    coeff = field.values[field.dofmap.cell_dofs[triangle]].reshape(6, 2)
    value = vals[0] @ coeff
    grad = np.einsum("nd,nc->cd", gref[0] @ invJT.T, coeff)
    return value, grad
