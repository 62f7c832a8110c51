"""Newton solution of the discrete forward flow problem for a fixed control."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .forms import (FemContext, assemble_state_jacobian,
                    assemble_state_residual, control_at_qp, eval_vector)
from .spaces import Field, interpolate_nodal


@dataclass
class NewtonSettings:
    atol: float = 1e-12
    rtol: float = 1e-12
    maxit: int = 50
    ls_min_step: float = 1e-4

    def __post_init__(self):
        if self.atol <= 0 or self.rtol <= 0:
            raise ValueError("tolerances must be positive")
        if self.maxit < 1:
            raise ValueError("maxit must be at least 1")


class NewtonError(RuntimeError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class StateSolution:
    u: Field
    p: Field
    lam: float
    iterations: int
    residuals: list = field(default_factory=list)


def _line_search(residual_fn, x, delta, r_norm, min_step):
    """Backtracking on the residual norm; returns the accepted iterate."""
    step = 1.0
    best = None
    while step >= min_step:
        cand = x + step * delta
        r = residual_fn(cand)
        nrm = np.linalg.norm(r)
        if best is None or nrm < best[2]:
            best = (cand, r, nrm)
        if nrm < (1.0 - 1e-4 * step) * r_norm:
            return cand, r, nrm
        step *= 0.5
    return best


def newton_solve(residual_fn, jacobian_fn, x0, settings):
    """Damped Newton iteration on a generic residual/jacobian pair."""
    x = x0
    r = residual_fn(x)
    r_norm = np.linalg.norm(r)
    tol = max(settings.atol, settings.rtol * r_norm)
    history = [r_norm]
    iterations = 0
    while r_norm > tol:
        if iterations >= settings.maxit:
            raise NewtonError(
                f"no convergence in {settings.maxit} iterations "
                f"(residual {r_norm:.3e}, target {tol:.3e})", history)
        J = jacobian_fn(x)
        delta = linalg.factorize(J).solve(-r)
        x, r, r_norm = _line_search(residual_fn, x, delta, r_norm,
                                    settings.ls_min_step)
        iterations += 1
        history.append(r_norm)
    return x, iterations, history


def dirichlet_data(ctx, problem):
    """Constrained velocity dofs and their boundary values."""
    dd = ctx.velocity.dirichlet_dofs(problem.dirichlet_markers)
    gfield = interpolate_nodal(ctx.velocity, problem.g)
    return dd, gfield.values[dd]


def solve_stokes(problem, ctx, gamma_qp):
    """Linear solve with the transport term omitted; used as initial guess."""
    nu2, np1 = ctx.nu_dofs, ctx.np_dofs
    dd, gvals = dirichlet_data(ctx, problem)
    f_qp = eval_vector(ctx, problem.f)
    x0 = np.zeros(nu2 + np1 + 1)
    r = assemble_state_residual(ctx, x0[:nu2], x0[nu2:nu2 + np1], 0.0,
                                gamma_qp, f_qp, problem.nu, dd, gvals,
                                include_convection=False)
    J = assemble_state_jacobian(ctx, x0[:nu2], gamma_qp, problem.nu, dd,
                                include_convection=False)
    return linalg.factorize(J).solve(-r)


def solve_state(problem, ctx_or_mesh, gamma, settings=None,
                include_convection=True, initial=None):
    """Solve the discrete flow equations by damped Newton.

    gamma may be a control Field, a callable of (x, y), or a scalar. Returns
    a StateSolution whose pressure has zero mean by construction.
    """
    settings = settings or NewtonSettings()
    ctx = (ctx_or_mesh if isinstance(ctx_or_mesh, FemContext)
           else FemContext(ctx_or_mesh))
    nu2, np1 = ctx.nu_dofs, ctx.np_dofs
    dd, gvals = dirichlet_data(ctx, problem)
    gamma_qp = control_at_qp(ctx, gamma)
    f_qp = eval_vector(ctx, problem.f)

    def residual(x):
        return assemble_state_residual(ctx, x[:nu2], x[nu2:nu2 + np1], x[-1],
                                       gamma_qp, f_qp, problem.nu, dd, gvals,
                                       include_convection=include_convection)

    def jacobian(x):
        return assemble_state_jacobian(ctx, x[:nu2], gamma_qp, problem.nu, dd,
                                       include_convection=include_convection)

    x0 = solve_stokes(problem, ctx, gamma_qp) if initial is None else initial
    x, iterations, history = newton_solve(residual, jacobian, x0, settings)
    return StateSolution(
        u=Field(ctx.velocity, x[:nu2]),
        p=Field(ctx.pressure, x[nu2:nu2 + np1]),
        lam=float(x[-1]),
        iterations=iterations,
        residuals=history,
    )
