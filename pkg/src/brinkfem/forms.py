"""Quadrature-backed assembly of the flow, adjoint, and control couplings.

A FemContext binds one mesh to precomputed geometry and basis tables at the
default volume degree. Element contributions are dense (T, ...) tensors
combined by einsum; repeated system builds reuse a fixed sparsity pattern
through TripletAssembler, so each Newton iteration only refills values.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import spaces
from .quadrature import TriangleRule, triangle_rule, edge_rule
from .spaces import (CELL_P0, NODAL_P1, SCALAR_P1, VECTOR_P2, DofMap, Field,
                     ImplicitControl, p1_reference, p2_reference, project_box)

DEFAULT_VOLUME_DEGREE = 8
DEFAULT_EDGE_DEGREE = 6
ERROR_DEGREE_BOOST = 4

__all__ = [
    "FemContext", "TriangleRule", "triangle_rule", "edge_rule",
    "TripletAssembler", "assemble_state_residual", "assemble_state_jacobian",
    "assemble_adjoint_system", "restrict_observation", "control_at_qp",
    "DEFAULT_VOLUME_DEGREE", "DEFAULT_EDGE_DEGREE", "ERROR_DEGREE_BOOST",
]


class FemContext:
    """Geometry, basis tables, and dof maps for one mesh."""

    def __init__(self, mesh, volume_degree=DEFAULT_VOLUME_DEGREE,
                 edge_degree=DEFAULT_EDGE_DEGREE):
        self.mesh = mesh
        self.volume_degree = volume_degree
        self.edge_degree = edge_degree
        self.rule = triangle_rule(volume_degree)

        p = mesh.vertices[mesh.triangles]          # (T, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        self.detJ = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        inv = np.empty((len(p), 2, 2))
        inv[:, 0, 0] = d2[:, 1]
        inv[:, 0, 1] = -d2[:, 0]
        inv[:, 1, 0] = -d1[:, 1]
        inv[:, 1, 1] = d1[:, 0]
        inv /= self.detJ[:, None, None]
        self.invJT = inv.transpose(0, 2, 1).copy()
        self._corner = p[:, 0]
        self._d1, self._d2 = d1, d2

        self.velocity = DofMap(mesh, VECTOR_P2)
        self.pressure = DofMap(mesh, SCALAR_P1)
        self.nu_dofs = self.velocity.ndof
        self.np_dofs = self.pressure.ndof

        rule = self.rule
        self.W = rule.weights[None, :] * self.detJ[:, None]      # (T, nq)
        self.qp = self.physical_points(rule.bary)                # (T, nq, 2)
        self.P1V, self.G1R = p1_reference(rule.bary)
        self.P2V, G2R, H2R = p2_reference(rule.bary)
        self.G1 = np.einsum("edb,nb->end", self.invJT, self.G1R)
        self.G2 = np.einsum("edb,qnb->eqnd", self.invJT, G2R)
        self.LAP2 = np.einsum("eda,nab,edb->en", self.invJT, H2R, self.invJT)
        self._outer_p2 = np.einsum("qi,qj->qij", self.P2V, self.P2V)
        self.cache = {}

    def physical_points(self, bary):
        """Map barycentric points (nq, 3) into every triangle: (T, nq, 2)."""
        bary = np.atleast_2d(bary)
        return (self._corner[:, None, :]
                + bary[None, :, 1, None] * self._d1[:, None, :]
                + bary[None, :, 2, None] * self._d2[:, None, :])

    def p2_gradients_for(self, bary):
        """Physical P2 gradients (T, nq, 6, 2) at arbitrary reference points."""
        _, G2R, _ = p2_reference(bary)
        return np.einsum("edb,qnb->eqnd", self.invJT, G2R)

    # -- field evaluation at the context quadrature points ---------------------

    def p2_cell_coeffs(self, values):
        return values[self.velocity.cell_dofs].reshape(-1, 6, 2)

    def p2_values(self, values):
        return np.einsum("qn,enc->eqc", self.P2V, self.p2_cell_coeffs(values))

    def p2_gradients(self, values):
        return np.einsum("enc,eqnd->eqcd", self.p2_cell_coeffs(values), self.G2)

    def p2_divergence(self, values):
        g = self.p2_gradients(values)
        return g[:, :, 0, 0] + g[:, :, 1, 1]

    def p2_laplacians(self, values):
        """Per-element (constant) Laplacian of each component: (T, 2)."""
        return np.einsum("enc,en->ec", self.p2_cell_coeffs(values), self.LAP2)

    def p1_values(self, values):
        return np.einsum("qn,en->eq", self.P1V, values[self.pressure.cell_dofs])

    def p1_gradients(self, values):
        """Per-element (constant) gradient: (T, 2)."""
        return np.einsum("en,end->ed", values[self.pressure.cell_dofs], self.G1)


def control_at_qp(ctx, gamma, uvals=None, vvals=None):
    """Control values at the context quadrature points: (T, nq).

    Accepts a cellwise-constant or nodal-linear Field, an ImplicitControl
    (optionally with preevaluated state/adjoint values), a plain callable of
    (x, y), or a scalar.
    """
    nq = ctx.rule.npoints
    if isinstance(gamma, Field):
        fam = gamma.dofmap.family
        if fam == CELL_P0:
            return np.broadcast_to(gamma.values[:, None],
                                   (ctx.mesh.num_triangles, nq))
        if fam in (NODAL_P1, SCALAR_P1):
            return np.einsum("qn,en->eq", ctx.P1V,
                             gamma.values[gamma.dofmap.cell_dofs])
        raise ValueError(f"unsupported control family {fam}")
    if isinstance(gamma, ImplicitControl):
        if uvals is None:
            uvals = ctx.p2_values(gamma.u.values)
        if vvals is None:
            vvals = ctx.p2_values(gamma.v.values)
        g0 = eval_scalar(ctx, gamma.gamma0)
        s = g0 + (uvals * vvals).sum(axis=2) / gamma.alpha
        return project_box(s, gamma.lo, gamma.hi)
    if callable(gamma):
        return eval_scalar(ctx, gamma)
    return np.full((ctx.mesh.num_triangles, nq), float(gamma))


def eval_scalar(ctx, fn):
    x, y = ctx.qp[:, :, 0], ctx.qp[:, :, 1]
    out = fn(x, y)
    return np.broadcast_to(np.asarray(out, dtype=float), x.shape)


def eval_vector(ctx, fn):
    x, y = ctx.qp[:, :, 0], ctx.qp[:, :, 1]
    out = np.asarray(fn(x, y), dtype=float)
    if out.shape[0] == 2 and out.shape != x.shape + (2,):
        out = np.moveaxis(out, 0, -1)
    return np.ascontiguousarray(out)


# -- element tensors -------------------------------------------------------------


def expand_components(S):
    """Lift a scalar element matrix (T, k, k) to interleaved vector dofs."""
    T, k, _ = S.shape
    out = np.zeros((T, 2 * k, 2 * k))
    out[:, 0::2, 0::2] = S
    out[:, 1::2, 1::2] = S
    return out


def vector_stiffness_tensor(ctx):
    if "stiffness" not in ctx.cache:
        S = np.einsum("eq,eqid,eqjd->eij", ctx.W, ctx.G2, ctx.G2, optimize=True)
        S = 0.5 * (S + S.transpose(0, 2, 1))   # exact symmetry despite roundoff
        ctx.cache["stiffness"] = expand_components(S)
    return ctx.cache["stiffness"]


def divergence_tensor(ctx):
    """(T, 3, 12) pairing of pressure tests with velocity divergence."""
    if "divergence" not in ctx.cache:
        B = np.einsum("eq,qk,eqjb->ekjb", ctx.W, ctx.P1V, ctx.G2, optimize=True)
        ctx.cache["divergence"] = B.reshape(len(B), 3, 12)
    return ctx.cache["divergence"]


def pressure_integral_vector(ctx):
    """Global vector of pressure-basis integrals, for the mean constraint."""
    if "pmean" not in ctx.cache:
        m = np.einsum("eq,qk->ek", ctx.W, ctx.P1V)
        ctx.cache["pmean"] = np.bincount(ctx.pressure.cell_dofs.ravel(),
                                         weights=m.ravel(),
                                         minlength=ctx.np_dofs)
    return ctx.cache["pmean"]


def vector_mass_tensor(ctx, coef):
    """(T, 12, 12) mass with a scalar coefficient given at quadrature points."""
    S = np.einsum("eq,qij->eij", ctx.W * coef, ctx._outer_p2, optimize=True)
    return expand_components(S)


def convection_tensors(ctx, uvals, ugrads):
    """Linearized transport blocks at the current velocity.

    Returns (N1, N2) with N1 the (u . grad)phi part and N2 the grad-u part.
    """
    t = np.einsum("eqd,eqjd->eqj", uvals, ctx.G2)
    C = np.einsum("eq,qi,eqj->eij", ctx.W, ctx.P2V, t, optimize=True)
    N1 = expand_components(C)
    DM = np.einsum("eq,qij,eqab->eijab", ctx.W, ctx._outer_p2, ugrads,
                   optimize=True)
    N2 = np.zeros_like(N1)
    for a in range(2):
        for b in range(2):
            N2[:, a::2, b::2] = DM[:, :, :, a, b]
    return N1, N2


def adjoint_velocity_tensor(ctx, uvals, ugrads, coef):
    """(T, 12, 12) operator of the dual momentum equation in v.

    Contains viscous stiffness, both transposed transport couplings, and the
    zeroth-order coefficient (nu is folded in by the caller via coef blocks).
    """
    N1, N2 = convection_tensors(ctx, uvals, ugrads)
    A = N1.transpose(0, 2, 1) + N2.transpose(0, 2, 1)
    return A + vector_mass_tensor(ctx, coef)


def adjoint_u_coupling_tensor(ctx, vvals):
    """Derivative of the dual transport terms with respect to the velocity."""
    A1 = np.einsum("eq,qi,eqja,eqb->eijab", ctx.W, ctx.P2V, ctx.G2, vvals,
                   optimize=True)
    A2 = np.einsum("eq,eqib,qj,eqa->eijab", ctx.W, ctx.G2, ctx.P2V, vvals,
                   optimize=True)
    M = A1 + A2
    out = np.zeros((len(M), 12, 12))
    for a in range(2):
        for b in range(2):
            out[:, a::2, b::2] = M[:, :, :, a, b]
    return out


def outer_mass_tensor(ctx, coef, avals, bvals):
    """(T, 12, 12) block of int coef * a_alpha * b_beta * phi_i phi_j."""
    cab = (coef[:, :, None, None] * avals[:, :, :, None]
           * bvals[:, :, None, :])
    M = np.einsum("eq,eqab,qij->eijab", ctx.W, cab, ctx._outer_p2,
                  optimize=True)
    out = np.zeros((len(M), 12, 12))
    for a in range(2):
        for b in range(2):
            out[:, a::2, b::2] = M[:, :, :, a, b]
    return out


def vector_load_tensor(ctx, fvals):
    """(T, 12) element load for a vector density at quadrature points."""
    L = np.einsum("eq,eqa,qi->eia", ctx.W, fvals, ctx.P2V, optimize=True)
    return L.reshape(len(L), 12)


def scatter_vector(ctx, elem, dofmap=None):
    dofmap = dofmap or ctx.velocity
    size = dofmap.ndof
    return np.bincount(dofmap.cell_dofs.ravel(), weights=elem.ravel(),
                       minlength=size)


# -- fixed-pattern sparse assembly ------------------------------------------------


class TripletAssembler:
    """Reusable COO-to-CSR assembler for a fixed sparsity pattern."""

    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        key = rows * shape[1] + cols
        self.order = np.argsort(key, kind="stable")
        skey = key[self.order]
        first = np.empty(len(skey), dtype=bool)
        first[0] = True
        np.not_equal(skey[1:], skey[:-1], out=first[1:])
        self.starts = np.nonzero(first)[0]
        ukey = skey[self.starts]
        urows = ukey // shape[1]
        self.indices = (ukey % shape[1]).astype(np.int32)
        counts = np.bincount(urows, minlength=shape[0])
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.shape = shape

    def assemble(self, data):
        vals = np.add.reduceat(data[self.order], self.starts)
        return sp.csr_matrix((vals, self.indices, self.indptr),
                             shape=self.shape, copy=False)


def _block_triplets(row_dofs, col_dofs, row_offset=0, col_offset=0):
    """Index arrays for a dense element block (T, nr) x (T, nc)."""
    T, nr = row_dofs.shape
    nc = col_dofs.shape[1]
    rows = np.repeat(row_dofs + row_offset, nc, axis=1).ravel()
    cols = np.tile(col_dofs + col_offset, (1, nr)).ravel()
    return rows, cols


# -- observation region ------------------------------------------------------------


def restrict_observation(mesh, omega):
    """Elementwise indicator of the observation region.

    omega is None/"all" for the whole domain or an axis-aligned rectangle
    (x0, x1, y0, y1) that must be resolved by the mesh.
    """
    T = mesh.num_triangles
    if omega is None or omega == "all":
        return np.ones(T, dtype=bool)
    x0, x1, y0, y1 = map(float, omega)
    tol = 1e-12
    pv = mesh.vertices[mesh.triangles]
    inside_closed = ((pv[:, :, 0] >= x0 - tol) & (pv[:, :, 0] <= x1 + tol)
                     & (pv[:, :, 1] >= y0 - tol) & (pv[:, :, 1] <= y1 + tol))
    strict_in = ((pv[:, :, 0] > x0 + tol) & (pv[:, :, 0] < x1 - tol)
                 & (pv[:, :, 1] > y0 + tol) & (pv[:, :, 1] < y1 - tol))
    strict_out = ~inside_closed
    if np.any(strict_in.any(axis=1) & strict_out.any(axis=1)):
        raise ValueError("an element straddles the observation boundary")
    cent = mesh.centroids()
    return ((cent[:, 0] > x0) & (cent[:, 0] < x1)
            & (cent[:, 1] > y0) & (cent[:, 1] < y1))


# -- forward (state) system ---------------------------------------------------------


def _forward_pattern(ctx, dirichlet_dofs):
    key = ("forward_pattern", tuple(np.sort(dirichlet_dofs)[:8]),
           len(dirichlet_dofs))
    if key in ctx.cache:
        return ctx.cache[key]
    nu, npp = ctx.nu_dofs, ctx.np_dofs
    N = nu + npp + 1
    vdofs = ctx.velocity.cell_dofs
    pdofs = ctx.pressure.cell_dofs

    r_vv, c_vv = _block_triplets(vdofs, vdofs)
    r_vp, c_vp = _block_triplets(vdofs, pdofs, 0, nu)
    r_pv, c_pv = _block_triplets(pdofs, vdofs, nu, 0)
    lam_rows = np.full(npp, nu + npp)
    p_rows = np.arange(npp) + nu
    ident = np.asarray(dirichlet_dofs, dtype=np.int64)

    rows = np.concatenate([r_vv, r_vp, r_pv, p_rows, lam_rows, ident])
    cols = np.concatenate([c_vv, c_vp, c_pv, lam_rows, p_rows, ident])
    assembler = TripletAssembler(rows, cols, (N, N))

    keep = np.ones(nu, dtype=bool)
    keep[ident] = False
    mask_vv = keep[r_vv]
    mask_vp = keep[r_vp]
    pattern = dict(assembler=assembler, mask_vv=mask_vv, mask_vp=mask_vp,
                   n_ident=len(ident))
    ctx.cache[key] = pattern
    return pattern


def assemble_state_jacobian(ctx, u_coeffs, gamma_qp, nu_visc, dirichlet_dofs,
                            include_convection=True):
    """Exact linearization of the discrete flow equations.

    Rows of constrained dofs are replaced by identity rows; the last row and
    column carry the zero-mean pressure multiplier.
    """
    pattern = _forward_pattern(ctx, dirichlet_dofs)
    VV = nu_visc * vector_stiffness_tensor(ctx)
    if include_convection:
        uvals = ctx.p2_values(u_coeffs)
        ugrads = ctx.p2_gradients(u_coeffs)
        N1, N2 = convection_tensors(ctx, uvals, ugrads)
        VV = VV + N1 + N2
    VV = VV + vector_mass_tensor(ctx, gamma_qp)

    B = divergence_tensor(ctx)                       # (T, 3, 12)
    m = pressure_integral_vector(ctx)
    VP = -np.transpose(B, (0, 2, 1))                 # -(p, div w) on u-rows

    data = np.concatenate([
        VV.ravel() * pattern["mask_vv"],
        VP.ravel() * pattern["mask_vp"],
        -B.ravel(),
        m,
        m,
        np.ones(pattern["n_ident"]),
    ])
    return pattern["assembler"].assemble(data)


def assemble_state_residual(ctx, u_coeffs, p_coeffs, lam, gamma_qp, f_qp,
                            nu_visc, dirichlet_dofs, dirichlet_values,
                            include_convection=True):
    """Nonlinear residual of the discrete flow equations (momentum,
    continuity, and pressure-mean rows)."""
    uvals = ctx.p2_values(u_coeffs)
    ugrads = ctx.p2_gradients(u_coeffs)
    pvals = ctx.p1_values(p_coeffs)

    vec = gamma_qp[:, :, None] * uvals - f_qp
    if include_convection:
        vec = vec + np.einsum("eqab,eqb->eqa", ugrads, uvals)
    # momentum rows: viscous + zeroth order/forcing + pressure coupling
    elem = np.einsum("eq,eqad,eqid->eia", ctx.W * nu_visc, ugrads, ctx.G2,
                     optimize=True)
    elem += np.einsum("eq,eqa,qi->eia", ctx.W, vec, ctx.P2V, optimize=True)
    elem -= np.einsum("eq,eqia->eia", ctx.W * pvals, ctx.G2, optimize=True)
    r_u = scatter_vector(ctx, elem.reshape(-1, 12))

    div = ugrads[:, :, 0, 0] + ugrads[:, :, 1, 1]
    elem_p = -np.einsum("eq,qk->ek", ctx.W * div, ctx.P1V, optimize=True)
    m = pressure_integral_vector(ctx)
    r_p = np.bincount(ctx.pressure.cell_dofs.ravel(), weights=elem_p.ravel(),
                      minlength=ctx.np_dofs) + lam * m
    r_lam = float(m @ p_coeffs)

    r_u[dirichlet_dofs] = u_coeffs[dirichlet_dofs] - dirichlet_values
    return np.concatenate([r_u, r_p, [r_lam]])


def assemble_adjoint_residual(ctx, u_coeffs, v_coeffs, q_coeffs, lam_q,
                              gamma_qp, obs_mask, u0_qp, nu_visc,
                              dirichlet_dofs):
    """Residual of the dual momentum/continuity/mean rows at (v, q)."""
    uvals = ctx.p2_values(u_coeffs)
    vvals = ctx.p2_values(v_coeffs)
    ugrads = ctx.p2_gradients(u_coeffs)
    vgrads = ctx.p2_gradients(v_coeffs)
    qvals = ctx.p1_values(q_coeffs)
    chi = obs_mask.astype(float)[:, None, None]

    # pointwise vector part: (grad u)^T v + gamma v - chi (u - u0)
    vec = (np.einsum("eqba,eqb->eqa", ugrads, vvals)
           + gamma_qp[:, :, None] * vvals
           - chi * (uvals - u0_qp))
    elem = np.einsum("eq,eqad,eqid->eia", ctx.W * nu_visc, vgrads, ctx.G2,
                     optimize=True)
    elem += np.einsum("eq,eqa,qi->eia", ctx.W, vec, ctx.P2V, optimize=True)
    # c(w, u, v): v_a (u . grad phi_i)
    conv = np.einsum("eqd,eqid->eqi", uvals, ctx.G2)
    elem += np.einsum("eq,eqi,eqa->eia", ctx.W, conv, vvals, optimize=True)
    elem -= np.einsum("eq,eqia->eia", ctx.W * qvals, ctx.G2, optimize=True)
    r_v = scatter_vector(ctx, elem.reshape(-1, 12))

    div = vgrads[:, :, 0, 0] + vgrads[:, :, 1, 1]
    elem_q = -np.einsum("eq,qk->ek", ctx.W * div, ctx.P1V, optimize=True)
    m = pressure_integral_vector(ctx)
    r_q = np.bincount(ctx.pressure.cell_dofs.ravel(), weights=elem_q.ravel(),
                      minlength=ctx.np_dofs) + lam_q * m
    r_lam = float(m @ q_coeffs)

    r_v[dirichlet_dofs] = v_coeffs[dirichlet_dofs]
    return np.concatenate([r_v, r_q, [r_lam]])


def assemble_adjoint_system(ctx, u_coeffs, gamma_qp, obs_mask, u0_qp, nu_visc,
                            dirichlet_dofs):
    """Linear system for the dual variables at a given state.

    Returns (matrix, rhs) over (v, q, multiplier); the dual velocity gets
    homogeneous conditions on the constrained dofs.
    """
    pattern = _forward_pattern(ctx, dirichlet_dofs)
    uvals = ctx.p2_values(u_coeffs)
    ugrads = ctx.p2_gradients(u_coeffs)

    VV = nu_visc * vector_stiffness_tensor(ctx)
    VV = VV + adjoint_velocity_tensor(ctx, uvals, ugrads, gamma_qp)
    B = divergence_tensor(ctx)
    m = pressure_integral_vector(ctx)
    VP = -np.transpose(B, (0, 2, 1))
    data = np.concatenate([
        VV.ravel() * pattern["mask_vv"],
        VP.ravel() * pattern["mask_vp"],
        -B.ravel(),
        m,
        m,
        np.ones(pattern["n_ident"]),
    ])
    A = pattern["assembler"].assemble(data)

    chi = obs_mask.astype(float)[:, None]
    mis = chi[:, :, None] * (uvals - u0_qp)
    rhs_v = scatter_vector(ctx, vector_load_tensor(ctx, mis))
    rhs_v[dirichlet_dofs] = 0.0
    rhs = np.concatenate([rhs_v, np.zeros(ctx.np_dofs), [0.0]])
    return A, rhs
