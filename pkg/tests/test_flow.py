"""Flow solver tests: Taylor-Hood Navier-Stokes, adjoint consistency,
manufactured-solution convergence and the vertex shape sensitivity."""

import numpy as np
import pytest

import shapeflow as sf
from shapeflow import flow as fl
from shapeflow.mesh import Marker, generate_benchmark_mesh, structured_rectangle

NU = 0.7


def v_exact(x):
    x = np.atleast_2d(x)
    return np.column_stack([
        np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]),
        -np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])])


def forcing(x):
    """Momentum source making (v_exact, sin(pi x) sin(pi y)) an exact
    stationary solution."""
    x = np.atleast_2d(x)
    sx, cx = np.sin(np.pi * x[:, 0]), np.cos(np.pi * x[:, 0])
    sy, cy = np.sin(np.pi * x[:, 1]), np.cos(np.pi * x[:, 1])
    f1 = (2.0 * NU * np.pi ** 2 * sx * cy
          + 0.5 * np.pi * np.sin(2.0 * np.pi * x[:, 0]) + np.pi * cx * sy)
    f2 = (-2.0 * NU * np.pi ** 2 * cx * sy
          + 0.5 * np.pi * np.sin(2.0 * np.pi * x[:, 1]) + np.pi * sx * cy)
    return np.column_stack([f1, f2])


def manufactured_problem(mesh):
    return fl.FlowProblem(
        mesh=mesh, nu=NU,
        bc={Marker.INFLOW: v_exact, Marker.OUTFLOW: v_exact,
            Marker.WALL: v_exact},
        forcing=forcing, pin_pressure=True, pin_value=0.0)


def velocity_l2_error(state):
    th = state.th
    vq, _, _ = th.at_quadrature(state.y)
    ve = v_exact(th.xq.reshape(-1, 2)).reshape(th.xq.shape)
    return float(np.sqrt(np.einsum("tq,tqi->", th.wdet, (vq - ve) ** 2)))


@pytest.fixture(scope="module")
def small_channel():
    mesh = generate_benchmark_mesh(8.0, 4.0, 1.0, n0=2, growth=1.4,
                                   hmax=1.0).finest
    problem = fl.benchmark_problem(mesh, 0.05, 4.0)
    state = fl.solve_flow(problem, tol=1e-12)
    return mesh, problem, state


class TestInflowProfile:
    def test_peak_at_center(self):
        v = fl.inflow_profile(np.array([[0.0, 0.0]]), 4.0)
        assert np.allclose(v, [[1.0, 0.0]])

    def test_vanishes_at_walls(self):
        v = fl.inflow_profile(np.array([[0.0, 2.0], [0.0, -2.0]]), 4.0)
        assert np.abs(v).max() < 1e-14

    def test_invalid_height(self):
        with pytest.raises(ValueError):
            fl.inflow_profile(np.zeros((1, 2)), 0.0)


class TestFlowSolve:
    def test_converges(self, small_channel):
        _, _, state = small_channel
        assert state.residual_norm <= 1e-12

    def test_dirichlet_values_exact(self, small_channel):
        mesh, problem, state = small_channel
        th = state.th
        dofs, values = fl.dirichlet_data(th, problem)
        assert np.abs(state.y[dofs] - values).max() < 1e-14

    def test_divergence_residual(self, small_channel):
        _, problem, state = small_channel
        th = state.th
        R = fl.assemble_ns_residual(th, problem, state.y)
        assert np.abs(R[2 * th.n2:]).max() <= 1e-10

    def test_energy_dissipation_positive(self, small_channel):
        _, _, state = small_channel
        assert fl.energy_dissipation(state) > 0.0

    def test_jacobian_vs_fd(self, small_channel):
        _, problem, state = small_channel
        th = state.th
        rng = np.random.default_rng(13)
        y = state.y + 0.01 * rng.standard_normal(state.y.size)
        J = fl.assemble_ns_jacobian(th, problem, y)
        h = 1e-6
        for _ in range(5):
            d = rng.standard_normal(y.size)
            fd = (fl.assemble_ns_residual(th, problem, y + h * d)
                  - fl.assemble_ns_residual(th, problem, y - h * d)) / (2 * h)
            an = J @ d
            assert np.linalg.norm(fd - an) <= 1e-6 * np.linalg.norm(fd)


class TestManufacturedSolution:
    def test_convergence_order(self):
        errs = []
        for nx in (4, 8, 16):
            mesh = structured_rectangle(0.0, 1.0, 0.0, 1.0, nx, nx)
            state = fl.solve_flow(manufactured_problem(mesh), tol=1e-12)
            errs.append(velocity_l2_error(state))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert orders.min() >= 2.5

    def test_divergence_at_converged_state(self):
        mesh = structured_rectangle(0.0, 1.0, 0.0, 1.0, 8, 8)
        problem = manufactured_problem(mesh)
        state = fl.solve_flow(problem, tol=1e-12)
        R = fl.assemble_ns_residual(state.th, problem, state.y)
        assert np.abs(R[2 * state.th.n2:]).max() <= 1e-10


class TestAdjointAndShapeGradient:
    def test_adjoint_residual(self, small_channel):
        _, _, state = small_channel
        adj = fl.solve_adjoint(state)
        assert adj.residual_norm < 1e-10

    def test_adjoint_zero_on_dirichlet(self, small_channel):
        _, problem, state = small_channel
        adj = fl.solve_adjoint(state)
        dofs, _ = fl.dirichlet_data(state.th, problem)
        assert np.abs(adj.y[dofs]).max() == 0.0

    def test_shape_gradient_vs_fd(self, small_channel):
        mesh, _, state = small_channel
        adj = fl.solve_adjoint(state)
        G = fl.shape_gradient(state, adj)
        rng = np.random.default_rng(14)
        free = np.ones(mesh.n_nodes, bool)
        free[mesh.marked_nodes(Marker.INFLOW, Marker.OUTFLOW,
                               Marker.WALL)] = False
        h = 1e-6
        for _ in range(5):
            d = rng.standard_normal((mesh.n_nodes, 2))
            d[~free] = 0.0
            d *= 0.5 / np.abs(d).max()

            def resolve(sign):
                m = mesh.copy()
                m.nodes = mesh.nodes + sign * h * d
                st = fl.solve_flow(fl.benchmark_problem(m, state.nu, 4.0),
                                   tol=1e-12)
                return fl.energy_dissipation(st)

            fd = (resolve(1.0) - resolve(-1.0)) / (2.0 * h)
            an = float((G * d).sum())
            assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-8)

    def test_shape_gradient_zero_on_fixed_boundary(self, small_channel):
        mesh, _, state = small_channel
        adj = fl.solve_adjoint(state)
        G = fl.shape_gradient(state, adj)
        fixed = mesh.marked_nodes(Marker.INFLOW, Marker.OUTFLOW, Marker.WALL)
        assert np.abs(G[fixed]).max() == 0.0

    def test_forcing_not_supported(self):
        mesh = structured_rectangle(0.0, 1.0, 0.0, 1.0, 4, 4)
        problem = manufactured_problem(mesh)
        state = fl.solve_flow(problem, tol=1e-12)
        adj = fl.solve_adjoint(state)
        with pytest.raises(fl.FlowError):
            fl.shape_gradient(state, adj)
