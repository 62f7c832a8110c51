import numpy as np
import pytest
from math import factorial

import brinkfem.linalg as linalg
from brinkfem.forms import (FemContext, assemble_adjoint_system,
                            assemble_state_jacobian, assemble_state_residual,
                            control_at_qp, convection_tensors,
                            divergence_tensor, restrict_observation,
                            vector_stiffness_tensor)
from brinkfem.mesh import build_structured_square
from brinkfem.quadrature import triangle_rule, edge_rule
from brinkfem.spaces import (CELL_P0, SCALAR_P1, VECTOR_P2, DofMap, Field,
                             interpolate_nodal, zero_field)

RNG = np.random.default_rng(7)


def monomial_integral(p, q):
    """Closed form of the reference-triangle integral of x^p y^q."""
    return factorial(p) * factorial(q) / factorial(p + q + 2)


class TestQuadrature:
    def test_degree1_area(self):
        r = triangle_rule(1)
        assert np.isclose(r.weights.sum(), 0.5, atol=1e-15)

    def test_degree5_monomial(self):
        r = triangle_rule(5)
        x, y = r.points[:, 0], r.points[:, 1]
        val = (r.weights * x ** 3 * y ** 2).sum()
        assert abs(val - monomial_integral(3, 2)) <= 1e-14

    def test_degree2_fails_degree6(self):
        r = triangle_rule(2)
        x = r.points[:, 0]
        val = (r.weights * x ** 6).sum()
        assert abs(val - monomial_integral(6, 0)) > 1e-4

    @pytest.mark.parametrize("degree", list(range(1, 15)))
    def test_exactness_catalog(self, degree):
        r = triangle_rule(degree)
        assert abs(r.weights.sum() - 0.5) <= 1e-13
        x, y = r.points[:, 0], r.points[:, 1]
        for p in range(degree + 1):
            for q in range(degree + 1 - p):
                val = (r.weights * x ** p * y ** q).sum()
                assert abs(val - monomial_integral(p, q)) <= 1e-13, (degree, p, q)

    def test_unsupported_degree(self):
        with pytest.raises(ValueError):
            triangle_rule(0)
        with pytest.raises(ValueError):
            triangle_rule(42)

    def test_edge_rule(self):
        x, w = edge_rule(6)
        assert np.isclose(w.sum(), 1.0)
        for p in range(7):
            assert abs((w * x ** p).sum() - 1.0 / (p + 1)) <= 1e-14


@pytest.fixture(scope="module")
def ctx4():
    return FemContext(build_structured_square(4))


def smooth_velocity(ctx, seed=3):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=6)

    def fn(x, y):
        return np.stack([c[0] * np.sin(x) + c[1] * y ** 2 + c[2] * x * y,
                         c[3] * np.cos(y) + c[4] * x ** 2 + c[5] * x * y],
                        axis=-1)
    return interpolate_nodal(ctx.velocity, fn)


class TestFormAccuracy:
    def test_b_form_against_independent_rule(self, ctx4):
        B = divergence_tensor(ctx4)
        v = smooth_velocity(ctx4)
        rng = np.random.default_rng(5)
        q = Field(ctx4.pressure, rng.normal(size=ctx4.np_dofs))
        qe = q.values[ctx4.pressure.cell_dofs]
        ve = v.values[ctx4.velocity.cell_dofs]
        b_assembled = -np.einsum("ek,ekj,ej->", qe, B, ve)

        fine = FemContext(ctx4.mesh, volume_degree=12)
        qvals = fine.p1_values(q.values)
        div = fine.p2_divergence(v.values)
        b_direct = -(fine.W * qvals * div).sum()
        assert abs(b_assembled - b_direct) <= 1e-12 * max(1.0, abs(b_direct))

    def test_stiffness_symmetric(self, ctx4):
        K = vector_stiffness_tensor(ctx4)
        assert np.array_equal(K, np.transpose(K, (0, 2, 1)))

    def test_quadrature_degree_headroom(self):
        mesh = build_structured_square(2)
        ctx_a = FemContext(mesh, volume_degree=8)
        ctx_b = FemContext(mesh, volume_degree=10)
        gamma = lambda x, y: x ** 2 * y + 0.5
        u = smooth_poly = interpolate_nodal(
            ctx_a.velocity, lambda x, y: np.stack([x * y, x ** 2], axis=-1))
        Ja = assemble_state_jacobian(ctx_a, u.values, control_at_qp(ctx_a, gamma),
                                     1.0, np.empty(0, dtype=int))
        Jb = assemble_state_jacobian(ctx_b, u.values, control_at_qp(ctx_b, gamma),
                                     1.0, np.empty(0, dtype=int))
        diff = abs(Ja - Jb).max()
        scale = abs(Ja).max()
        assert diff <= 1e-10 * scale

    def test_transport_skew_identity(self, ctx4):
        # exactly divergence-free quadratic advecting field (curl of a cubic)
        u = interpolate_nodal(
            ctx4.velocity,
            lambda x, y: np.stack([x ** 2 + 2 * x * y, -2 * x * y - y ** 2],
                                  axis=-1))
        uvals = ctx4.p2_values(u.values)
        ugrads = ctx4.p2_gradients(u.values)
        N1, _ = convection_tensors(ctx4, uvals, ugrads)
        rng = np.random.default_rng(11)
        bnd = ctx4.velocity.dirichlet_dofs({1, 2, 3, 4})
        w1 = rng.normal(size=ctx4.nu_dofs)
        w2 = rng.normal(size=ctx4.nu_dofs)
        w1[bnd] = 0.0
        w2[bnd] = 0.0
        w1e = w1[ctx4.velocity.cell_dofs]
        w2e = w2[ctx4.velocity.cell_dofs]
        c12 = np.einsum("ei,eij,ej->", w2e, N1, w1e)
        c21 = np.einsum("ei,eij,ej->", w1e, N1, w2e)
        assert abs(c12 + c21) <= 1e-10 * max(1.0, abs(c12))


class TestStateResidualAndJacobian:
    def test_zero_everything(self, ctx4):
        nu2, np1 = ctx4.nu_dofs, ctx4.np_dofs
        gamma = control_at_qp(ctx4, 0.0)
        f_qp = np.zeros((ctx4.mesh.num_triangles, ctx4.rule.npoints, 2))
        dd = ctx4.velocity.dirichlet_dofs({1, 2, 3, 4})
        r = assemble_state_residual(ctx4, np.zeros(nu2), np.zeros(np1), 0.0,
                                    gamma, f_qp, 1.0, dd, np.zeros(len(dd)))
        assert np.all(r == 0.0)

    def test_jacobian_at_zero_is_stokes(self, ctx4):
        gamma = control_at_qp(ctx4, lambda x, y: 0.3 + 0.1 * x ** 2)
        dd = ctx4.velocity.dirichlet_dofs({1, 2, 3, 4})
        J_nl = assemble_state_jacobian(ctx4, np.zeros(ctx4.nu_dofs), gamma,
                                       1.0, dd, include_convection=True)
        J_st = assemble_state_jacobian(ctx4, np.zeros(ctx4.nu_dofs), gamma,
                                       1.0, dd, include_convection=False)
        assert abs(J_nl - J_st).max() == 0.0

    def test_finite_difference_oracle(self, ctx4):
        rng = np.random.default_rng(99)
        nu2, np1 = ctx4.nu_dofs, ctx4.np_dofs
        N = nu2 + np1 + 1
        dd = ctx4.velocity.dirichlet_dofs({1, 2, 3, 4})
        gamma = control_at_qp(ctx4, lambda x, y: 0.5 * (1 + np.cos(x * y)))
        f_qp = np.stack([np.sin(ctx4.qp[:, :, 0]), ctx4.qp[:, :, 1] ** 2],
                        axis=-1)
        gvals = np.zeros(len(dd))

        for trial in range(3):
            u = rng.normal(scale=0.3, size=nu2)
            p = rng.normal(size=np1)
            lam = rng.normal()
            x0 = np.concatenate([u, p, [lam]])

            def residual(x):
                return assemble_state_residual(
                    ctx4, x[:nu2], x[nu2:nu2 + np1], x[-1], gamma, f_qp, 1.0,
                    dd, gvals)

            r0 = residual(x0)
            J = assemble_state_jacobian(ctx4, u, gamma, 1.0, dd)
            eps = 1e-7
            for _ in range(5):
                d = rng.normal(size=N)
                fd = (residual(x0 + eps * d) - r0) / eps
                Jd = J @ d
                assert np.linalg.norm(fd - Jd) <= 1e-6 * np.linalg.norm(Jd)

    def test_constant_pressure_hits_only_multiplier_row(self, ctx4):
        gamma = control_at_qp(ctx4, 0.0)
        dd = ctx4.velocity.dirichlet_dofs({1, 2, 3, 4})
        J = assemble_state_jacobian(ctx4, np.zeros(ctx4.nu_dofs), gamma, 1.0, dd)
        x = np.zeros(ctx4.nu_dofs + ctx4.np_dofs + 1)
        x[ctx4.nu_dofs:ctx4.nu_dofs + ctx4.np_dofs] = 1.0
        y = J @ x
        assert np.allclose(y[:-1], 0.0, atol=1e-12)
        assert np.isclose(y[-1], 4.0)   # domain measure

    def test_dirichlet_preserves_interior_rows(self, ctx4):
        rng = np.random.default_rng(17)
        u = rng.normal(size=ctx4.nu_dofs)
        p = rng.normal(size=ctx4.np_dofs)
        gamma = control_at_qp(ctx4, 0.7)
        f_qp = np.zeros((ctx4.mesh.num_triangles, ctx4.rule.npoints, 2))
        dd = ctx4.velocity.dirichlet_dofs({1, 2, 3, 4})
        r_free = assemble_state_residual(ctx4, u, p, 0.1, gamma, f_qp, 1.0,
                                         np.empty(0, dtype=int), np.empty(0))
        r_bc = assemble_state_residual(ctx4, u, p, 0.1, gamma, f_qp, 1.0, dd,
                                       np.zeros(len(dd)))
        interior = np.setdiff1d(np.arange(len(r_free)), dd)
        assert np.array_equal(r_free[interior], r_bc[interior])


class TestAdjointSystem:
    def test_zero_mismatch_gives_zero_dual(self, ctx4):
        u0 = lambda x, y: np.stack([np.sin(np.pi * x) * np.sin(np.pi * y),
                                    np.cos(np.pi * x) * np.cos(np.pi * y)],
                                   axis=-1)
        u = interpolate_nodal(ctx4.velocity, u0)
        obs = restrict_observation(ctx4.mesh, (-0.5, 0.5, -0.5, 0.5))
        xq, yq = ctx4.qp[:, :, 0], ctx4.qp[:, :, 1]
        u0_qp = np.stack([np.sin(np.pi * xq) * np.sin(np.pi * yq),
                          np.cos(np.pi * xq) * np.cos(np.pi * yq)], axis=-1)
        # evaluate the interpolant exactly so u - u0 = interpolation error only
        u0_qp = ctx4.p2_values(u.values)
        gamma = control_at_qp(ctx4, 0.2)
        dd = ctx4.velocity.dirichlet_dofs({1, 2, 3, 4})
        A, rhs = assemble_adjoint_system(ctx4, u.values, gamma, obs, u0_qp,
                                         1.0, dd)
        assert np.linalg.norm(rhs) == 0.0
        sol = linalg.solve(A, rhs)
        assert np.linalg.norm(sol) <= 1e-10

    def test_velocity_block_transposes_state_jacobian(self):
        mesh = build_structured_square(1, lo=(0, 0), hi=(1, 1))
        ctx = FemContext(mesh)
        u = smooth_velocity(ctx, seed=21)
        gamma = control_at_qp(ctx, lambda x, y: 0.4 + x * y)
        none = np.empty(0, dtype=int)
        J = assemble_state_jacobian(ctx, u.values, gamma, 1.3, none)
        obs = restrict_observation(mesh, None)
        u_qp = ctx.p2_values(u.values)
        A, _ = assemble_adjoint_system(ctx, u.values, gamma, obs, u_qp, 1.3,
                                       none)
        nu2 = ctx.nu_dofs
        Jv = J[:nu2, :nu2].toarray()
        Av = A[:nu2, :nu2].toarray()
        assert np.allclose(Av, Jv.T, atol=1e-12)

    def test_empty_observation_zero_rhs(self, ctx4):
        u = smooth_velocity(ctx4)
        obs = restrict_observation(ctx4.mesh, (5.0, 6.0, 5.0, 6.0))
        assert not obs.any()
        u_qp = ctx4.p2_values(u.values)
        dd = ctx4.velocity.dirichlet_dofs({1, 2, 3, 4})
        _, rhs = assemble_adjoint_system(ctx4, u.values,
                                         control_at_qp(ctx4, 0.0), obs, u_qp,
                                         1.0, dd)
        assert np.linalg.norm(rhs) == 0.0


class TestObservation:
    def test_full_domain(self, ctx4):
        assert restrict_observation(ctx4.mesh, "all").all()

    def test_center_square(self, ctx4):
        obs = restrict_observation(ctx4.mesh, (-0.5, 0.5, -0.5, 0.5))
        assert obs.sum() == 8

    def test_disjoint(self, ctx4):
        assert restrict_observation(ctx4.mesh, (5, 6, 5, 6)).sum() == 0

    def test_straddling_rejected(self, ctx4):
        with pytest.raises(ValueError):
            restrict_observation(ctx4.mesh, (-0.25, 0.25, -0.25, 0.25))
