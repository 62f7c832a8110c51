"""Coupled optimality solvers for the three control discretizations.

The cellwise-constant scheme solves one monolithic semi-smooth Newton system
over (state, adjoint, control, multipliers). The nodal-linear scheme runs a
Picard loop (state solve, adjoint solve, clamped nodal update), falling back
to the variational scheme plus an L2 projection when the penalty is too small
for the Picard map to contract. The variational ("semi") scheme eliminates
the control through the clamp and Newton-iterates on (state, adjoint) with
the clamp's generalized derivative inside the Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import linalg
from .forms import (FemContext, TripletAssembler, _block_triplets,
                    adjoint_u_coupling_tensor, adjoint_velocity_tensor,
                    assemble_adjoint_residual, assemble_adjoint_system,
                    assemble_state_residual, control_at_qp, convection_tensors,
                    divergence_tensor, eval_scalar, eval_vector,
                    outer_mass_tensor, pressure_integral_vector,
                    restrict_observation, scatter_vector, vector_load_tensor,
                    vector_mass_tensor, vector_stiffness_tensor)
from .spaces import (CELL_P0, NODAL_P1, DofMap, Field, ImplicitControl,
                     interpolate_nodal, project_box, project_p0)
from .state import (NewtonError, NewtonSettings, dirichlet_data, newton_solve,
                    solve_state, solve_stokes)

P0 = "p0"
P1 = "p1"
SEMI = "semi"
SCHEMES = (P0, P1, SEMI)

PICARD_TOL = 1e-6
PICARD_MAXIT = 200
# Picard needs the penalty to dominate; below this the nodal scheme reuses
# the variational solve with a final projection onto the linear space.
PICARD_ALPHA_MIN = 5e-4


class PicardError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class KktSolution:
    scheme: str
    u: Field
    p: Field
    v: Field
    q: Field
    gamma: object            # Field (p0/p1) or ImplicitControl (semi)
    lam_p: float
    lam_q: float
    iterations: int
    residuals: list = field(default_factory=list)
    box_violation: float = 0.0
    extras: dict = field(default_factory=dict)


def gamma_star_values(u_qp, v_qp, gamma0_qp, alpha, lo, hi):
    """Pointwise optimal control: clamp of gamma0 + (u . v)/alpha."""
    s = gamma0_qp + (u_qp * v_qp).sum(axis=-1) / alpha
    return project_box(s, lo, hi), s


def clamp_active(s, lo, hi):
    """Generalized derivative of the clamp; boundary ties count as inactive."""
    return ((s >= lo) & (s <= hi)).astype(float)


def evaluate_cost(problem, ctx, solution):
    """Tracking cost plus penalty via the context quadrature."""
    obs = restrict_observation(ctx.mesh, problem.omega)
    uvals = ctx.p2_values(solution.u.values)
    u0_qp = eval_vector(ctx, problem.u0)
    chi = obs.astype(float)[:, None]
    track = 0.5 * (ctx.W * chi * ((uvals - u0_qp) ** 2).sum(axis=2)).sum()
    g0 = eval_scalar(ctx, problem.gamma0)
    gam = control_at_qp(ctx, solution.gamma, uvals=uvals)
    pen = 0.5 * problem.alpha * (ctx.W * (gam - g0) ** 2).sum()
    return track + pen


class _CoupledOperator:
    """Residual/Jacobian of the monolithic optimality system."""

    def __init__(self, problem, ctx, scheme):
        if scheme not in (P0, SEMI):
            raise ValueError(scheme)
        self.problem = problem
        self.ctx = ctx
        self.scheme = scheme
        self.nu2 = ctx.nu_dofs
        self.np1 = ctx.np_dofs
        self.ntri = ctx.mesh.num_triangles
        self.ng = self.ntri if scheme == P0 else 0

        self.off_u = 0
        self.off_p = self.nu2
        self.off_v = self.nu2 + self.np1
        self.off_q = 2 * self.nu2 + self.np1
        self.off_g = 2 * (self.nu2 + self.np1)
        self.off_lp = self.off_g + self.ng
        self.off_lq = self.off_lp + 1
        self.size = self.off_lq + 1

        self.dd_u, self.gvals = dirichlet_data(ctx, problem)
        self.dd_v = self.dd_u
        self.obs = restrict_observation(ctx.mesh, problem.omega)
        self.f_qp = eval_vector(ctx, problem.f)
        self.u0_qp = eval_vector(ctx, problem.u0)
        self.g0_qp = eval_scalar(ctx, problem.gamma0)
        self.m = pressure_integral_vector(ctx)
        self.visc = problem.nu * vector_stiffness_tensor(ctx)
        self.B = divergence_tensor(ctx)
        self.obs_mass = vector_mass_tensor(ctx, self.obs.astype(float)[:, None]
                                           * np.ones(ctx.rule.npoints))
        self._build_pattern()

    def _build_pattern(self):
        ctx = self.ctx
        vd = ctx.velocity.cell_dofs
        pd = ctx.pressure.cell_dofs
        tri = np.arange(self.ntri)

        keep_u = np.ones(self.nu2, dtype=bool)
        keep_u[self.dd_u] = False
        keep_v = np.ones(self.nu2, dtype=bool)
        keep_v[self.dd_v] = False

        rows, cols, masks = [], [], []

        def add(r, c, keep=None):
            rows.append(r)
            cols.append(c)
            masks.append(np.ones(len(r)) if keep is None else
                         keep[r - (self.off_v if keep is keep_v_glob else 0)])

        # helpers carrying global row offsets with the right keep array
        keep_v_glob = keep_v

        def add_block(rdofs, cdofs, roff, coff, keep=None):
            r, c = _block_triplets(rdofs, cdofs, roff, coff)
            rows.append(r)
            cols.append(c)
            if keep is None:
                masks.append(np.ones(len(r)))
            else:
                masks.append(keep[r - roff].astype(float))

        add_block(vd, vd, self.off_u, self.off_u, keep_u)          # uu
        add_block(vd, pd, self.off_u, self.off_p, keep_u)          # up
        add_block(pd, vd, self.off_p, self.off_u)                  # pu
        add_block(vd, vd, self.off_u, self.off_v, keep_u)          # uv
        add_block(vd, vd, self.off_v, self.off_u, keep_v)          # vu
        add_block(vd, vd, self.off_v, self.off_v, keep_v)          # vv
        add_block(vd, pd, self.off_v, self.off_q, keep_v)          # vq
        add_block(pd, vd, self.off_q, self.off_v)                  # qv
        if self.scheme == P0:
            tri_col = np.repeat(tri, 12)
            rows.append(vd.ravel() + self.off_u)                   # ug
            cols.append(tri_col + self.off_g)
            masks.append(keep_u[vd.ravel()].astype(float))
            rows.append(vd.ravel() + self.off_v)                   # vg
            cols.append(tri_col + self.off_g)
            masks.append(keep_v[vd.ravel()].astype(float))
            rows.append(tri_col + self.off_g)                      # gu
            cols.append(vd.ravel())
            masks.append(np.ones(12 * self.ntri))
            rows.append(tri_col + self.off_g)                      # gv
            cols.append(vd.ravel() + self.off_v)
            masks.append(np.ones(12 * self.ntri))
            rows.append(tri + self.off_g)                          # gg identity
            cols.append(tri + self.off_g)
            masks.append(np.ones(self.ntri))

        parts = [
            (np.arange(self.np1) + self.off_p, np.full(self.np1, self.off_lp)),
            (np.full(self.np1, self.off_lp), np.arange(self.np1) + self.off_p),
            (np.arange(self.np1) + self.off_q, np.full(self.np1, self.off_lq)),
            (np.full(self.np1, self.off_lq), np.arange(self.np1) + self.off_q),
            (self.dd_u + self.off_u, self.dd_u + self.off_u),
            (self.dd_v + self.off_v, self.dd_v + self.off_v),
        ]
        for r, c in parts:
            rows.append(r)
            cols.append(c)
            masks.append(np.ones(len(r)))

        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        self.mask = np.concatenate(masks)
        self.assembler = TripletAssembler(rows, cols, (self.size, self.size))

    # -- unknown layout ------------------------------------------------------------

    def split(self, x):
        nu2, np1 = self.nu2, self.np1
        u = x[self.off_u:self.off_u + nu2]
        p = x[self.off_p:self.off_p + np1]
        v = x[self.off_v:self.off_v + nu2]
        q = x[self.off_q:self.off_q + np1]
        g = x[self.off_g:self.off_g + self.ng]
        return u, p, v, q, g

    def gamma_qp(self, u, v, g):
        if self.scheme == P0:
            return np.broadcast_to(g[:, None],
                                   (self.ntri, self.ctx.rule.npoints))
        uvals = self.ctx.p2_values(u)
        vvals = self.ctx.p2_values(v)
        gam, s = gamma_star_values(uvals, vvals, self.g0_qp,
                                   self.problem.alpha, self.problem.lo,
                                   self.problem.hi)
        return gam

    def residual(self, x):
        ctx = self.ctx
        u, p, v, q, g = self.split(x)
        lam_p, lam_q = x[self.off_lp], x[self.off_lq]
        uvals = ctx.p2_values(u)
        vvals = ctx.p2_values(v)
        if self.scheme == P0:
            gam_qp = np.broadcast_to(g[:, None], uvals.shape[:2])
        else:
            gam_qp, _ = gamma_star_values(uvals, vvals, self.g0_qp,
                                          self.problem.alpha, self.problem.lo,
                                          self.problem.hi)
        r_state = assemble_state_residual(
            ctx, u, p, lam_p, gam_qp, self.f_qp, self.problem.nu, self.dd_u,
            self.gvals)
        r_adj = assemble_adjoint_residual(
            ctx, u, v, q, lam_q, gam_qp, self.obs, self.u0_qp,
            self.problem.nu, self.dd_v)
        parts = [r_state[:-1 - self.np1], r_state[-1 - self.np1:-1],
                 r_adj[:-1 - self.np1], r_adj[-1 - self.np1:-1]]
        if self.scheme == P0:
            star, _ = gamma_star_values(uvals, vvals, self.g0_qp,
                                        self.problem.alpha, self.problem.lo,
                                        self.problem.hi)
            means = (ctx.W * star).sum(axis=1) / ctx.mesh.areas
            parts.append(g - means)
        parts.append([r_state[-1], r_adj[-1]])
        return np.concatenate(parts)

    def jacobian(self, x):
        ctx = self.ctx
        prob = self.problem
        u, p, v, q, g = self.split(x)
        uvals = ctx.p2_values(u)
        ugrads = ctx.p2_gradients(u)
        vvals = ctx.p2_values(v)

        star, s = gamma_star_values(uvals, vvals, self.g0_qp, prob.alpha,
                                    prob.lo, prob.hi)
        if self.scheme == P0:
            gam_qp = np.broadcast_to(g[:, None], uvals.shape[:2])
        else:
            gam_qp = star
        chi = clamp_active(s, prob.lo, prob.hi) / prob.alpha

        N1, N2 = convection_tensors(ctx, uvals, ugrads)
        UU = self.visc + N1 + N2 + vector_mass_tensor(ctx, gam_qp)
        VV = (self.visc + N1.transpose(0, 2, 1) + N2.transpose(0, 2, 1)
              + vector_mass_tensor(ctx, gam_qp))
        VU = adjoint_u_coupling_tensor(ctx, vvals) - self.obs_mass
        if self.scheme == SEMI:
            UU = UU + outer_mass_tensor(ctx, chi, uvals, vvals)
            UV = outer_mass_tensor(ctx, chi, uvals, uvals)
            VU = VU + outer_mass_tensor(ctx, chi, vvals, vvals)
            VV = VV + outer_mass_tensor(ctx, chi, vvals, uvals)
        else:
            UV = np.zeros_like(UU)

        VP = -np.transpose(self.B, (0, 2, 1))
        data = [UU.ravel(), VP.ravel(), -self.B.ravel(), UV.ravel(),
                VU.ravel(), VV.ravel(), VP.ravel(), -self.B.ravel()]
        if self.scheme == P0:
            Wu = vector_load_tensor(ctx, uvals)
            Wv = vector_load_tensor(ctx, vvals)
            inv_area = 1.0 / ctx.mesh.areas
            Gu = -vector_load_tensor(ctx, chi[:, :, None] * vvals) * inv_area[:, None]
            Gv = -vector_load_tensor(ctx, chi[:, :, None] * uvals) * inv_area[:, None]
            data += [Wu.ravel(), Wv.ravel(), Gu.ravel(), Gv.ravel(),
                     np.ones(self.ntri)]
        data += [self.m, self.m, self.m, self.m,
                 np.ones(len(self.dd_u)), np.ones(len(self.dd_v))]
        flat = np.concatenate(data) * self.mask
        return self.assembler.assemble(flat)

    def initial_guess(self):
        ctx = self.ctx
        prob = self.problem
        if self.scheme == P0:
            g0 = project_p0(ctx, lambda x, y: project_box(
                prob.gamma0(x, y), prob.lo, prob.hi)).values
            gam_qp = np.broadcast_to(g0[:, None],
                                     (self.ntri, ctx.rule.npoints))
        else:
            g0 = np.empty(0)
            gam_qp = project_box(self.g0_qp, prob.lo, prob.hi)
        stokes = solve_stokes(prob, ctx, gam_qp)
        x0 = np.zeros(self.size)
        x0[:self.nu2] = stokes[:self.nu2]
        x0[self.off_p:self.off_p + self.np1] = stokes[self.nu2:-1]
        if self.scheme == P0:
            x0[self.off_g:self.off_g + self.ng] = g0
        return x0

    def package(self, x, iterations, history):
        ctx = self.ctx
        prob = self.problem
        u, p, v, q, g = self.split(x)
        u_f = Field(ctx.velocity, u.copy())
        p_f = Field(ctx.pressure, p.copy())
        v_f = Field(ctx.velocity, v.copy())
        q_f = Field(ctx.pressure, q.copy())
        if self.scheme == P0:
            gamma = Field(DofMap(ctx.mesh, CELL_P0), g.copy())
        else:
            gamma = ImplicitControl(u_f, v_f, prob.gamma0, prob.alpha,
                                    prob.lo, prob.hi)
        return KktSolution(
            scheme=self.scheme, u=u_f, p=p_f, v=v_f, q=q_f, gamma=gamma,
            lam_p=float(x[self.off_lp]), lam_q=float(x[self.off_lq]),
            iterations=iterations, residuals=history)


def _solve_coupled(problem, ctx_or_mesh, scheme, settings=None, initial=None):
    settings = settings or NewtonSettings()
    ctx = (ctx_or_mesh if isinstance(ctx_or_mesh, FemContext)
           else FemContext(ctx_or_mesh))
    op = _CoupledOperator(problem, ctx, scheme)
    x0 = op.initial_guess() if initial is None else initial
    x, iterations, history = newton_solve(op.residual, op.jacobian, x0,
                                          settings)
    return op.package(x, iterations, history)


def solve_kkt_p0(problem, ctx_or_mesh, settings=None, initial=None):
    """Monolithic semi-smooth Newton with a cellwise-constant control."""
    return _solve_coupled(problem, ctx_or_mesh, P0, settings, initial)


def solve_kkt_semidiscrete(problem, ctx_or_mesh, settings=None, initial=None):
    """Semi-smooth Newton with the control eliminated through the clamp."""
    return _solve_coupled(problem, ctx_or_mesh, SEMI, settings, initial)


def _nodal_velocity_dot(ctx, u, v):
    """(u . v) at mesh vertices, read off the interleaved coefficients."""
    nvert = ctx.mesh.num_vertices
    ux, uy = u[0:2 * nvert:2], u[1:2 * nvert:2]
    vx, vy = v[0:2 * nvert:2], v[1:2 * nvert:2]
    return ux * vx + uy * vy


def solve_kkt_p1(problem, ctx_or_mesh, settings=None, strategy="auto",
                 picard_tol=PICARD_TOL, picard_maxit=PICARD_MAXIT):
    """Nodal-linear control by Picard iteration (or the variational
    fallback with an L2 projection when the penalty is small)."""
    settings = settings or NewtonSettings()
    ctx = (ctx_or_mesh if isinstance(ctx_or_mesh, FemContext)
           else FemContext(ctx_or_mesh))
    if strategy == "auto":
        strategy = "picard" if problem.alpha >= PICARD_ALPHA_MIN else "semismooth"
    if strategy == "semismooth":
        return _p1_via_projection(problem, ctx, settings)

    dofmap = DofMap(ctx.mesh, NODAL_P1)
    verts = ctx.mesh.vertices
    g0_nodal = problem.gamma0(verts[:, 0], verts[:, 1])
    gamma = Field(dofmap, project_box(g0_nodal, problem.lo, problem.hi))

    dd, _ = dirichlet_data(ctx, problem)
    obs = restrict_observation(ctx.mesh, problem.omega)
    u0_qp = eval_vector(ctx, problem.u0)

    x_state = None
    diffs, costs = [], []
    stall = 0
    for outer in range(1, picard_maxit + 1):
        sol = solve_state(problem, ctx, gamma, settings, initial=x_state)
        x_state = np.concatenate([sol.u.values, sol.p.values, [sol.lam]])
        A, rhs = assemble_adjoint_system(ctx, sol.u.values,
                                         control_at_qp(ctx, gamma), obs,
                                         u0_qp, problem.nu, dd)
        dual = linalg.factorize(A).solve(rhs)
        v = dual[:ctx.nu_dofs]
        q = dual[ctx.nu_dofs:-1]

        nodal = project_box(
            g0_nodal + _nodal_velocity_dot(ctx, sol.u.values, v) / problem.alpha,
            problem.lo, problem.hi)
        diff = float(np.linalg.norm(nodal - gamma.values))
        diffs.append(diff)
        gamma = Field(dofmap, nodal)
        partial = KktSolution(P1, sol.u, sol.p, Field(ctx.velocity, v),
                              Field(ctx.pressure, q), gamma, sol.lam,
                              float(dual[-1]), outer)
        costs.append(evaluate_cost(problem, ctx, partial))
        if diff <= picard_tol:
            partial.residuals = diffs
            partial.extras["cost_history"] = costs
            partial.extras["strategy"] = "picard"
            return partial
        if len(diffs) >= 2 and diffs[-1] > 0.95 * diffs[-2]:
            stall += 1
            if stall >= 10:
                raise PicardError(
                    "Picard contraction ratio above 0.95 for 10 consecutive "
                    "iterations; penalty too small for this scheme", diffs)
        else:
            stall = 0
    raise PicardError(f"Picard did not reach {picard_tol} in "
                      f"{picard_maxit} iterations", diffs)


def _p1_via_projection(problem, ctx, settings):
    """Variational solve followed by an L2 projection onto nodal linears.

    The projected control may leave the admissible box; the violation is
    reported on the solution rather than clipped away.
    """
    sol = _solve_coupled(problem, ctx, SEMI, settings)
    star = control_at_qp(ctx, sol.gamma)

    dofmap = DofMap(ctx.mesh, NODAL_P1)
    pd = ctx.pressure.cell_dofs     # same vertex dof layout as nodal linears
    M_elem = np.einsum("eq,qi,qj->eij", ctx.W, ctx.P1V, ctx.P1V, optimize=True)
    rows, cols = _block_triplets(pd, pd)
    M = sp.coo_matrix((M_elem.ravel(), (rows, cols)),
                      shape=(dofmap.ndof, dofmap.ndof)).tocsr()
    rhs_e = np.einsum("eq,qi->ei", ctx.W * star, ctx.P1V, optimize=True)
    rhs = np.bincount(pd.ravel(), weights=rhs_e.ravel(), minlength=dofmap.ndof)
    nodal = linalg.factorize(M).solve(rhs)

    violation = max(0.0, float(nodal.max() - problem.hi),
                    float(problem.lo - nodal.min()))
    gamma = Field(dofmap, nodal)
    return KktSolution(
        scheme=P1, u=sol.u, p=sol.p, v=sol.v, q=sol.q, gamma=gamma,
        lam_p=sol.lam_p, lam_q=sol.lam_q, iterations=sol.iterations,
        residuals=sol.residuals, box_violation=violation,
        extras={"strategy": "semismooth"})


def solve_scheme(problem, ctx_or_mesh, scheme, settings=None, initial=None,
                 **kwargs):
    if scheme == P0:
        return solve_kkt_p0(problem, ctx_or_mesh, settings, initial)
    if scheme == P1:
        return solve_kkt_p1(problem, ctx_or_mesh, settings, **kwargs)
    if scheme == SEMI:
        return solve_kkt_semidiscrete(problem, ctx_or_mesh, settings, initial)
    raise ValueError(f"unknown scheme {scheme!r}")
