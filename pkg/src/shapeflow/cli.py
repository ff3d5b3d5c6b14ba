"""Command-line entry points.

``shapeflow optimize --config <path>`` runs the shape optimization loop;
``shapeflow check --suite <name>`` runs one of the built-in verification
suites (finite-difference and oracle consistency checks).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import descent as de
from . import driver as dr
from . import flow as fl
from . import mesh as me
from . import saddle as sa


def _cmd_optimize(args) -> int:
    try:
        config = dr.parse_config(args.config)
        if args.out is not None:
            config.out_dir = args.out
        if args.levels is not None:
            config.levels = args.levels
        if args.max_steps is not None:
            config.max_steps = args.max_steps
        config.validate()
        if args.seed is not None:
            np.random.seed(args.seed)
        log = dr.run_optimize(config)
    except (dr.ConfigError, me.MeshError, de.DescentError, fl.FlowError,
            sa.SaddleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    accepted = log.accepted
    last = accepted[-1].objective if accepted else log.objective_0
    print(f"status: {log.exit_status}")
    print(f"accepted steps: {len(accepted)}")
    print(f"objective: {log.objective_0:.10g} -> {last:.10g}")
    return 2 if log.exit_status == "stalled" else 0


# ---------------------------------------------------------------------------
# verification suites


def _report(name: str, ok: bool, detail: str) -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def _suite_determinant(rng) -> bool:
    ok = True
    for d in (2, 3):
        worst = 0.0
        for _ in range(500):
            Dv = rng.standard_normal((d, d))
            t = rng.uniform(-0.5, 0.5)
            coeffs = de.det_expansion_coeffs(Dv, d)
            poly = sum(c * t ** k for k, c in enumerate(coeffs))
            worst = max(worst, abs(poly - np.linalg.det(np.eye(d) + t * Dv)))
        ok &= _report(f"det expansion d={d}", worst <= 1e-12,
                      f"max error {worst:.2e}")
    return ok


def _random_saddle(rng, n, m):
    Q = rng.standard_normal((n, n))
    A = Q @ Q.T + n * np.eye(n)
    B = rng.standard_normal((n, m))
    import scipy.sparse as sp
    return sa.SaddlePointSystem(A=sp.csr_matrix(A), B=B,
                                r_u=rng.standard_normal(n),
                                r_lambda=rng.standard_normal(m))


def _suite_saddle(rng) -> bool:
    ok = True
    worst = 0.0
    for _ in range(10):
        n, m = 40, 3
        system = _random_saddle(rng, n, m)
        inner = sa.build_inner_solver(system.A)
        du, dlam = sa.solve_saddle_direct(system, inner)
        A = system.A.toarray()
        K = np.block([[A, system.B],
                      [system.B.T, np.zeros((m, m))]])
        ref = np.linalg.solve(K, np.concatenate([system.r_u, system.r_lambda]))
        err = np.linalg.norm(np.concatenate([du, dlam]) - ref) \
            / np.linalg.norm(ref)
        worst = max(worst, err)
    ok &= _report("direct Schur vs monolithic", worst <= 1e-8,
                  f"max rel error {worst:.2e}")
    worst = 0.0
    for _ in range(10):
        system = _random_saddle(rng, 40, 3)
        inner = sa.build_inner_solver(system.A)
        du, y, iters, res, conv = sa.schur_gmres(
            inner, system.B, system.r_u, system.r_lambda)
        du0, dlam0 = sa.solve_saddle_direct(system, inner)
        err = np.linalg.norm(y - dlam0) / np.linalg.norm(dlam0)
        worst = max(worst, err)
        ok &= conv and iters <= 3
    ok &= _report("Schur GMRES vs direct", worst <= 1e-8,
                  f"max rel error {worst:.2e}")
    return ok


def _suite_gmres(rng) -> bool:
    a, b = 3.0, 4.0
    c, s, r = sa.givens(a, b)
    ok = _report("givens contract", abs(c * a + s * b - r) < 1e-14
                 and abs(-s * a + c * b) < 1e-14 and r == 5.0,
                 f"r = {r}")
    system = _random_saddle(rng, 60, 6)
    inner = sa.build_inner_solver(system.A)
    du, y, iters, res, conv = sa.schur_gmres(
        inner, system.B, system.r_u, system.r_lambda)
    ok &= _report("GMRES termination", conv and iters <= 6,
                  f"{iters} iterations, residual {res:.2e}")
    return ok


def _suite_derivatives(rng) -> bool:
    mesh = me.structured_rectangle(0.0, 1.0, 0.0, 1.0, 5, 5)
    geo = de.P1Geometry(mesh)
    n = mesh.n_nodes
    G = rng.standard_normal((n, 2)) * 0.1
    u = np.zeros((n, 2))
    free = geo.free_mask[:n]
    u[free] = 0.01 * rng.standard_normal((free.sum(), 2))
    lam = rng.standard_normal(3)
    sigma = 0.7
    h = 1e-6
    ok = True
    for p in (2.0, 2.57, 3.5, 4.5):
        r_u, _ = de.assemble_defect(mesh, u, lam, sigma, G, p, geo)
        worst = 0.0
        for _ in range(5):
            d = rng.standard_normal((n, 2))
            d[~free] = 0.0
            lp = de.lagrangian_value(mesh, u + h * d, lam, sigma, G, p, geo)
            lm = de.lagrangian_value(mesh, u - h * d, lam, sigma, G, p, geo)
            fd = (lp - lm) / (2 * h)
            an = -float(r_u @ de._flat(d))
            worst = max(worst, abs(fd - an) / max(abs(fd), 1e-12))
        ok &= _report(f"defect vs FD (p={p})", worst <= 1e-5,
                      f"max rel error {worst:.2e}")
    return ok


_SUITES = {
    "determinant": _suite_determinant,
    "saddle": _suite_saddle,
    "gmres": _suite_gmres,
    "derivatives": _suite_derivatives,
}


def _cmd_check(args) -> int:
    rng = np.random.default_rng(12345)
    if args.suite not in _SUITES:
        print(f"error: unknown suite {args.suite!r}; "
              f"choose from {sorted(_SUITES)}", file=sys.stderr)
        return 1
    ok = _SUITES[args.suite](rng)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapeflow",
        description="Constraint-preserving shape optimization of 2D "
                    "incompressible flow.")
    sub = parser.add_subparsers(dest="command", required=True)

    opt = sub.add_parser("optimize", help="run the optimization loop")
    opt.add_argument("--config", required=True, help="key=value config file")
    opt.add_argument("--out", help="output directory (overrides config)")
    opt.add_argument("--levels", type=int, help="refinement levels override")
    opt.add_argument("--max-steps", type=int, dest="max_steps",
                     help="accepted-step budget override")
    opt.add_argument("--seed", type=int, help="seed the global RNG")
    opt.set_defaults(func=_cmd_optimize)

    chk = sub.add_parser("check", help="run a verification suite")
    chk.add_argument("--suite", required=True,
                     help="one of: " + ", ".join(sorted(_SUITES)))
    chk.set_defaults(func=_cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
