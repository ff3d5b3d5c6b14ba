"""Acceptance suite: one test per release criterion.

Each test prints a single PASS line on success so the suite doubles as a
release report.  The end-to-end benchmark run is shared by the criteria
that need it and is executed once per session.
"""

import os
import time

import numpy as np
import pytest
import scipy.sparse as sp

import shapeflow as sf
from shapeflow import descent as de
from shapeflow import fem
from shapeflow import flow as fl
from shapeflow import saddle as sa
from shapeflow.driver import OptimConfig, run_optimize
from shapeflow.mesh import Marker, generate_benchmark_mesh, structured_rectangle


def report(name, detail):
    print(f"\n[PASS] {name}: {detail}")


def fe_stiffness_system(rng, nx, ny, m):
    """SPD FE stiffness block (Dirichlet-eliminated Laplacian plus mass)
    with random dense constraint columns."""
    mesh = structured_rectangle(0.0, 1.0, 0.0, 1.0, nx, ny)
    space = fem.FunctionSpace(mesh, "p1")
    K = fem.assemble_operator(space, space, fem.stiffness_kernel(space))
    M = fem.assemble_operator(space, space, fem.mass_kernel(space))
    A = (K + M).tocsr()
    n = space.n_dofs
    B = rng.standard_normal((n, m))
    return sa.SaddlePointSystem(A=A, B=B, r_u=rng.standard_normal(n),
                                r_lambda=rng.standard_normal(m))


class TestCriterion1SaddleOracle:
    def test_twenty_random_systems(self):
        rng = np.random.default_rng(101)
        t0 = time.perf_counter()
        worst_direct = worst_gmres = 0.0
        for trial in range(20):
            nx = int(rng.integers(10, 22))  # 121..529 dofs
            m = int(rng.choice([3, 4]))
            system = fe_stiffness_system(rng, nx, nx, m)
            inner = sa.build_inner_solver(system.A)
            K = np.block([[system.A.toarray(), system.B],
                          [system.B.T, np.zeros((m, m))]])
            ref = np.linalg.solve(
                K, np.concatenate([system.r_u, system.r_lambda]))
            refn = np.linalg.norm(ref)

            du, dlam = sa.solve_saddle_direct(system, inner)
            err = np.linalg.norm(np.concatenate([du, dlam]) - ref) / refn
            worst_direct = max(worst_direct, err)

            du, y, iters, _, conv = sa.schur_gmres(
                inner, system.B, system.r_u, system.r_lambda)
            assert conv
            assert iters <= m
            err = np.linalg.norm(np.concatenate([du, y]) - ref) / refn
            worst_gmres = max(worst_gmres, err)
        elapsed = time.perf_counter() - t0
        assert worst_direct <= 1e-8
        assert worst_gmres <= 1e-8
        assert elapsed < 10.0
        report("criterion 1 (saddle oracle)",
               f"direct {worst_direct:.2e}, gmres {worst_gmres:.2e}, "
               f"{elapsed:.1f}s")


class TestCriterion2Derivatives:
    def test_consistency_suite(self):
        t0 = time.perf_counter()
        mesh = structured_rectangle(0.0, 1.0, 0.0, 1.0, 5, 5)  # 50 elements
        geo = de.P1Geometry(mesh)
        rng = np.random.default_rng(202)
        n = mesh.n_nodes
        free = geo.free_mask[:n]
        u = np.zeros((n, 2))
        u[free] = 0.01 * rng.standard_normal((int(free.sum()), 2))
        G = 0.1 * rng.standard_normal((n, 2))
        lam = rng.standard_normal(3)
        sigma = 0.7
        h = 1e-6

        def direction():
            d = rng.standard_normal((n, 2))
            d[~free] = 0.0
            return d

        # defect vs finite differences of the Lagrangian
        worst_defect = 0.0
        for p in (2.0, 2.57, 3.5, 4.5):
            r_u, _ = de.assemble_defect(mesh, u, lam, sigma, G, p, geo)
            for _ in range(10):
                d = direction()
                lp = de.lagrangian_value(mesh, u + h * d, lam, sigma, G, p, geo)
                lm = de.lagrangian_value(mesh, u - h * d, lam, sigma, G, p, geo)
                fd = (lp - lm) / (2.0 * h)
                an = -float(r_u @ de._flat(d))
                worst_defect = max(worst_defect,
                                   abs(fd - an) / max(abs(fd), 1e-10))
        assert worst_defect <= 1e-5

        # Hessian action vs finite differences of the defect (p >= 4)
        worst_hess = 0.0
        for p in (4.0, 4.5):
            A = de.assemble_hessian(mesh, u, lam, p, 0.0, geo)
            for _ in range(10):
                d = direction()
                rp, _ = de.assemble_defect(mesh, u + h * d, lam, sigma, G, p, geo)
                rm, _ = de.assemble_defect(mesh, u - h * d, lam, sigma, G, p, geo)
                fd = -(rp - rm) / (2.0 * h)
                an = A @ de._flat(d)
                an[~geo.free_mask] = 0.0
                worst_hess = max(worst_hess,
                                 np.linalg.norm(fd - an) / np.linalg.norm(fd))
        assert worst_hess <= 1e-4

        # constraint Jacobian vs finite differences of g
        B = de.assemble_constraint_jacobian(mesh, u, geo)
        worst_B = 0.0
        for _ in range(10):
            d = direction()
            gp = de.constraint_values(mesh, u + h * d, geo).g
            gm = de.constraint_values(mesh, u - h * d, geo).g
            fd = (gp - gm) / (2.0 * h)
            an = B.T @ de._flat(d)
            worst_B = max(worst_B,
                          np.linalg.norm(fd - an) / max(np.linalg.norm(fd), 1.0))
        assert worst_B <= 1e-6

        # flow Jacobian vs finite differences of the residual
        cmesh = generate_benchmark_mesh(8.0, 4.0, 1.0, n0=2, growth=1.4,
                                        hmax=1.0).finest  # < 500 elements
        assert cmesh.n_triangles <= 500
        problem = fl.benchmark_problem(cmesh, 0.05, 4.0)
        state = fl.solve_flow(problem, tol=1e-12)
        th = state.th
        y = state.y + 0.01 * rng.standard_normal(state.y.size)
        J = fl.assemble_ns_jacobian(th, problem, y)
        worst_J = 0.0
        for _ in range(5):
            d = rng.standard_normal(y.size)
            fd = (fl.assemble_ns_residual(th, problem, y + h * d)
                  - fl.assemble_ns_residual(th, problem, y - h * d)) / (2 * h)
            worst_J = max(worst_J,
                          np.linalg.norm(fd - J @ d) / np.linalg.norm(fd))
        assert worst_J <= 1e-6

        # shape gradient vs finite differences of the re-solved objective
        adj = fl.solve_adjoint(state)
        Gs = fl.shape_gradient(state, adj)
        free_nodes = np.ones(cmesh.n_nodes, bool)
        free_nodes[cmesh.marked_nodes(Marker.INFLOW, Marker.OUTFLOW,
                                      Marker.WALL)] = False
        worst_G = 0.0
        for _ in range(5):
            d = rng.standard_normal((cmesh.n_nodes, 2))
            d[~free_nodes] = 0.0
            d *= 0.5 / np.abs(d).max()

            def resolve(sign):
                mm = cmesh.copy()
                mm.nodes = cmesh.nodes + sign * h * d
                st = fl.solve_flow(fl.benchmark_problem(mm, 0.05, 4.0),
                                   tol=1e-12)
                return fl.energy_dissipation(st)

            fd = (resolve(1.0) - resolve(-1.0)) / (2.0 * h)
            an = float((Gs * d).sum())
            worst_G = max(worst_G, abs(fd - an) / max(abs(fd), 1e-8))
        assert worst_G <= 1e-4

        elapsed = time.perf_counter() - t0
        assert elapsed < 120.0
        report("criterion 2 (derivative consistency)",
               f"defect {worst_defect:.2e}, hessian {worst_hess:.2e}, "
               f"B {worst_B:.2e}, flow J {worst_J:.2e}, "
               f"shape grad {worst_G:.2e}, {elapsed:.1f}s")


class TestCriterion3DetExpansion:
    def test_thousand_random_matrices(self):
        rng = np.random.default_rng(303)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(1000):
            d = int(rng.choice([2, 3]))
            Dv = rng.standard_normal((d, d))
            t = rng.uniform(-1.0, 1.0)
            coeffs = de.det_expansion_coeffs(Dv, d)
            poly = sum(c * t ** k for k, c in enumerate(coeffs))
            worst = max(worst,
                        abs(poly - np.linalg.det(np.eye(d) + t * Dv)))
        elapsed = time.perf_counter() - t0
        assert worst <= 1e-12
        assert elapsed < 1.0
        report("criterion 3 (determinant expansion)",
               f"max error {worst:.2e}, {elapsed:.2f}s")


class TestCriterion4FlowVerification:
    def test_manufactured_convergence(self):
        from test_flow import manufactured_problem, velocity_l2_error
        t0 = time.perf_counter()
        errs = []
        for nx in (4, 8, 16, 32):
            mesh = structured_rectangle(0.0, 1.0, 0.0, 1.0, nx, nx)
            problem = manufactured_problem(mesh)
            state = fl.solve_flow(problem, tol=1e-12)
            errs.append(velocity_l2_error(state))
            R = fl.assemble_ns_residual(state.th, problem, state.y)
            assert np.abs(R[2 * state.th.n2:]).max() <= 1e-10
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        elapsed = time.perf_counter() - t0
        assert orders.min() >= 2.5
        assert elapsed < 120.0
        report("criterion 4 (flow verification)",
               f"orders {np.round(orders, 2).tolist()}, {elapsed:.1f}s")


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    """Shared end-to-end optimization on the 20 x 6 channel at Re = 20."""
    out = tmp_path_factory.mktemp("benchmark")
    hierarchy = generate_benchmark_mesh(20.0, 6.0, 0.4, n0=3)
    for _ in range(1):
        sf.refine_uniform(hierarchy)
    config = OptimConfig(levels=1, nu=0.02, obstacle_edge=0.4,
                         max_steps=10, out_dir=str(out))
    t0 = time.perf_counter()
    log = run_optimize(config, hierarchy=hierarchy)
    elapsed = time.perf_counter() - t0
    return config, hierarchy, log, elapsed


class TestCriterion5EndToEnd:
    def test_benchmark_run(self, benchmark_run):
        config, hierarchy, log, elapsed = benchmark_run
        accepted = log.accepted
        assert len(accepted) >= 10

        values = [log.objective_0] + [r.objective for r in accepted]
        assert all(b < a for a, b in zip(values, values[1:]))

        mesh = hierarchy.finest
        for rec in accepted:
            assert rec.constraint_inf <= 1e-7
            assert rec.min_angle >= 5.0
        assert mesh.triangle_areas().min() > 0.0
        g_final = de.constraint_values(
            mesh, np.zeros((mesh.n_nodes, 2))).norm_inf
        assert g_final <= 1e-7

        ratio = accepted[-1].objective / log.objective_0
        assert ratio <= 0.9
        assert elapsed <= 1800.0
        n_rejected = sum(1 for r in log.records if r.kind == "rejected")
        report("criterion 5 (end-to-end benchmark)",
               f"{len(accepted)} accepted / {n_rejected} rejected steps, "
               f"J/J0 = {ratio:.4f}, min angle "
               f"{min(r.min_angle for r in accepted):.2f} deg, "
               f"{elapsed / 60.0:.1f} min")

    def test_rejection_restores_bitwise(self, tmp_path):
        """A forced-ascent run must leave the hierarchy bitwise intact."""
        hierarchy = generate_benchmark_mesh(8.0, 4.0, 1.0, n0=2, growth=1.4,
                                            hmax=1.0)
        before = [lvl.nodes.copy() for lvl in hierarchy.levels]
        config = OptimConfig(length=8.0, height=4.0, obstacle_edge=1.0,
                             n0=2, growth=1.4, hmax=1.0, levels=0, nu=0.05,
                             max_steps=1, sigma_min=2.0 ** -3,
                             out_dir=str(tmp_path), write_vtk=False)
        log = run_optimize(config, gradient_hook=lambda G: -G,
                           hierarchy=hierarchy)
        assert log.exit_status == "stalled"
        assert all(r.kind == "rejected" for r in log.records)
        for lvl, orig in zip(hierarchy.levels, before):
            assert np.array_equal(lvl.nodes, orig)
        report("criterion 5e (bitwise revert)",
               f"{len(log.records)} rejected trials, coordinates identical")


class TestCriterion6HierarchyConsistency:
    def test_injection_after_accepted_steps(self, benchmark_run):
        _, hierarchy, log, _ = benchmark_run
        assert log.accepted
        fine = hierarchy.finest
        worst = 0.0
        for lvl in hierarchy.levels[:-1]:
            worst = max(worst,
                        np.abs(lvl.nodes - fine.nodes[:lvl.n_nodes]).max())
        assert worst <= 1e-14
        report("criterion 6 (hierarchy injection)",
               f"max coarse/fine deviation {worst:.2e}")


class TestCriterion7Determinism:
    def test_bitwise_identical_runs(self, tmp_path):
        def one_run(sub):
            config = OptimConfig(levels=1, nu=0.02, max_steps=3,
                                 out_dir=str(tmp_path / sub))
            run_optimize(config)
            with open(os.path.join(config.out_dir, "run.csv"), "rb") as fh:
                return fh.read()

        a = one_run("a")
        b = one_run("b")
        assert a == b
        report("criterion 7 (determinism)",
               f"run.csv identical across two runs ({len(a)} bytes)")


class TestCriterion8GmresInternals:
    def test_internals(self):
        rng = np.random.default_rng(808)
        t0 = time.perf_counter()

        # Givens contracts across 100 random Hessenberg extensions
        for _ in range(100):
            k = int(rng.integers(2, 12))
            H = np.triu(rng.standard_normal((k + 1, k)), -1)
            for j in range(k):
                if H[j, j] == 0.0 and H[j + 1, j] == 0.0:
                    continue
                c, s, r = sa.givens(H[j, j], H[j + 1, j])
                assert abs(c * c + s * s - 1.0) <= 1e-14
                rot = np.array([[c, s], [-s, c]])
                H[j:j + 2, j:] = rot @ H[j:j + 2, j:]
                assert abs(H[j + 1, j]) <= 1e-13

        # residual monotonicity and basis orthonormality on solver runs
        worst_orth = 0.0
        for _ in range(30):
            n, m = 40, int(rng.integers(4, 9))
            Q = rng.standard_normal((n, n))
            A = sp.csr_matrix(Q @ Q.T + n * np.eye(n))
            B = rng.standard_normal((n, m))
            inner = sa.build_inner_solver(A)
            diag = {}
            _, _, iters, _, conv = sa.schur_gmres(
                inner, B, rng.standard_normal(n), rng.standard_normal(m),
                diagnostics=diag)
            assert conv
            res = diag["residuals"]
            assert all(b <= a * (1.0 + 1e-12) for a, b in zip(res, res[1:]))
            Qk = diag["Q"]
            if Qk.shape[1]:
                orth = np.abs(Qk.T @ Qk - np.eye(Qk.shape[1])).max()
                worst_orth = max(worst_orth, orth)
        assert worst_orth <= 1e-12
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0
        report("criterion 8 (GMRES internals)",
               f"orthonormality {worst_orth:.2e}, {elapsed:.2f}s")
