import numpy as np
import pytest

from brinkfem.bench import problem_test1
from brinkfem.forms import FemContext
from brinkfem.mesh import Mesh, build_structured_square
from brinkfem.state import NewtonError, NewtonSettings, solve_state


@pytest.fixture(scope="module")
def test1():
    return problem_test1()


def energy_error(prob, ctx_mesh, sol):
    ectx = FemContext(ctx_mesh, volume_degree=12)
    gu = ectx.p2_gradients(sol.u.values)
    x, y = ectx.qp[:, :, 0], ectx.qp[:, :, 1]
    err_u = (ectx.W * ((gu - prob.exact.grad_u(x, y)) ** 2).sum(axis=(2, 3))).sum()
    pv = ectx.p1_values(sol.p.values)
    err_p = (ectx.W * (pv - prob.exact.p(x, y)) ** 2).sum()
    return np.sqrt(err_u + err_p)


class TestZeroData:
    def test_zero_solution(self, test1):
        prob = problem_test1()
        zero_vec = lambda x, y: np.zeros(np.shape(x) + (2,))
        from dataclasses import replace
        quiet = replace(prob, f=zero_vec, g=zero_vec, exact=None)
        mesh = quiet.build_mesh(0)
        sol = solve_state(quiet, mesh, quiet.gamma0)
        assert sol.iterations <= 2
        assert np.linalg.norm(sol.u.values) <= 1e-12
        assert np.linalg.norm(sol.p.values) <= 1e-12


class TestManufactured:
    def test_energy_error_and_rate(self, test1):
        errs = {}
        for level in (2, 3):   # h = 1/8, 1/16
            mesh = test1.build_mesh(level)
            ctx = FemContext(mesh)
            sol = solve_state(test1, ctx, test1.exact.gamma)
            errs[level] = energy_error(test1, mesh, sol)
        # table scale at h=1/8 and second-order decay
        assert errs[2] == pytest.approx(9.128e-2, rel=0.10)
        assert 3.5 <= errs[2] / errs[3] <= 4.5

    def test_pressure_mean_zero(self, test1):
        mesh = test1.build_mesh(1)
        ctx = FemContext(mesh)
        sol = solve_state(test1, ctx, test1.exact.gamma)
        ectx = FemContext(mesh, volume_degree=4)
        pmean = (ectx.W * ectx.p1_values(sol.p.values)).sum()
        assert abs(pmean) <= 1e-10 * 4.0

    def test_discrete_mass_balance(self, test1):
        from brinkfem.forms import assemble_state_residual, control_at_qp, eval_vector
        from brinkfem.state import dirichlet_data
        mesh = test1.build_mesh(1)
        ctx = FemContext(mesh)
        sol = solve_state(test1, ctx, test1.exact.gamma)
        dd, gvals = dirichlet_data(ctx, test1)
        r = assemble_state_residual(
            ctx, sol.u.values, sol.p.values, sol.lam,
            control_at_qp(ctx, test1.exact.gamma), eval_vector(ctx, test1.f),
            test1.nu, dd, gvals)
        p_rows = r[ctx.nu_dofs:ctx.nu_dofs + ctx.np_dofs]
        assert np.max(np.abs(p_rows)) <= 1e-10


class TestStokesLimit:
    def test_linear_problem_converges_immediately(self, test1):
        mesh = test1.build_mesh(1)
        sol = solve_state(test1, mesh, test1.exact.gamma,
                          include_convection=False)
        assert sol.iterations <= 1


class TestNewtonBehavior:
    def test_quadratic_tail(self, test1):
        mesh = test1.build_mesh(2)
        ctx = FemContext(mesh)
        # degrade the initial guess so the iteration has a visible history
        from brinkfem.forms import control_at_qp
        from brinkfem.state import solve_stokes
        x0 = 0.2 * solve_stokes(test1, ctx, control_at_qp(ctx, test1.exact.gamma))
        sol = solve_state(test1, ctx, test1.exact.gamma, initial=x0)
        hist = sol.residuals
        tail = [(a, b) for a, b in zip(hist[:-1], hist[1:])
                if 1e-8 <= a <= 0.5]
        assert tail, "no quadratic-regime iterations recorded"
        for a, b in tail:
            assert b <= 1e3 * a ** 2

    def test_nonconvergence_raises(self, test1):
        mesh = test1.build_mesh(0)
        ctx = FemContext(mesh)
        bad = np.full(ctx.nu_dofs + ctx.np_dofs + 1, 50.0)
        with pytest.raises(NewtonError):
            solve_state(test1, ctx, test1.exact.gamma,
                        NewtonSettings(maxit=1), initial=bad)

    def test_element_order_invariance(self, test1):
        mesh = test1.build_mesh(1)
        rng = np.random.default_rng(4)
        perm = rng.permutation(mesh.num_triangles)
        markers = {}
        for e in np.nonzero(mesh.boundary_edge_mask)[0]:
            key = (int(mesh.edges[e, 0]), int(mesh.edges[e, 1]))
            markers[key] = int(mesh.edge_markers[e])
        shuffled = Mesh(mesh.vertices, mesh.triangles[perm], markers)
        sol_a = solve_state(test1, mesh, test1.exact.gamma)
        sol_b = solve_state(test1, shuffled, test1.exact.gamma)
        # same vertex numbering, so vertex dofs are directly comparable
        nv = 2 * mesh.num_vertices
        assert np.max(np.abs(sol_a.u.values[:nv] - sol_b.u.values[:nv])) <= 1e-9
