"""Schur-complement solvers for the descent saddle-point system.

The Newton step of the constrained descent subproblem couples a large
symmetric block A with a handful of dense constraint columns B.  Block
elimination reduces it to the m x m Schur complement S = -B^T A^{-1} B,
which is either formed column by column and solved directly (the default)
or attacked with a small GMRES using two-pass classical Gram-Schmidt and
Givens rotations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SaddleError(Exception):
    pass


class RankDeficiencyError(SaddleError):
    """Singular Schur complement: constraints are redundant."""


class InnerSolver:
    """Solver handle for systems with the A block.

    ``mode='direct'`` factorizes once and reuses the factorization for all
    solves of a Newton step; ``mode='iterative'`` runs CG to a relative
    residual tolerance.
    """

    def __init__(self, A: sp.spmatrix, mode: str = "direct", tol: float = 1e-12):
        self.A = A.tocsc()
        self.mode = mode
        self.tol = tol
        if mode == "direct":
            try:
                self._lu = spla.splu(self.A)
            except RuntimeError as exc:
                raise SaddleError(f"factorization failed: {exc}") from None
            diag_ok = np.all(np.isfinite(self._lu.U.diagonal()))
            if not diag_ok or np.abs(self._lu.U.diagonal()).min() == 0.0:
                raise SaddleError("matrix is singular")
        elif mode == "iterative":
            self._lu = None
        else:
            raise ValueError(f"unknown inner solver mode {mode!r}")

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.mode == "direct":
            x = self._lu.solve(b)
            if not np.all(np.isfinite(x)):
                raise SaddleError("direct solve produced non-finite values")
            return x
        x, info = spla.cg(self.A, b, rtol=self.tol, atol=0.0, maxiter=10 * len(b))
        if info != 0:
            raise SaddleError(f"CG failed to converge (info={info})")
        return x


def build_inner_solver(A: sp.spmatrix, mode: str = "direct",
                       tol: float = 1e-12) -> InnerSolver:
    return InnerSolver(A, mode=mode, tol=tol)


def givens(a: float, b: float):
    """Rotation (c, s, r) with c*a + s*b = r = hypot(a, b) and
    -s*a + c*b = 0; overflow-safe."""
    if a == 0.0 and b == 0.0:
        raise ValueError("givens undefined for (0, 0)")
    r = np.hypot(a, b)
    return a / r, b / r, r


def schur_product(inner: InnerSolver, B: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply S = -B^T A^{-1} B to a small vector w."""
    b = B @ w
    z = inner.solve(b)
    return -(B.T @ z)


@dataclass
class SaddlePointSystem:
    """Blocks of one Newton step: symmetric A (n x n), dense columns B
    (n x m), and the residuals r_u (n,), r_lambda (m,)."""

    A: sp.spmatrix
    B: np.ndarray
    r_u: np.ndarray
    r_lambda: np.ndarray


def solve_saddle_direct(system: SaddlePointSystem, inner: InnerSolver):
    """Direct m x m Schur solve.

    Forms S column by column (m inner solves), one more solve for the
    reduced right-hand side and a final back substitution for du:
    m + 2 inner solves in total.
    """
    B, r_u, r_lam = system.B, system.r_u, system.r_lambda
    m = B.shape[1]
    if m == 0 or not np.any(B):
        return inner.solve(r_u), np.zeros(m)
    w = inner.solve(r_u)
    rhs = r_lam - B.T @ w
    S = np.empty((m, m))
    for i in range(m):
        S[:, i] = schur_product(inner, B, np.eye(m)[:, i])
    try:
        dlam = np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError("Schur complement is singular") from None
    du = inner.solve(r_u - B @ dlam)
    return du, dlam


def schur_gmres(inner: InnerSolver, B: np.ndarray, r_u: np.ndarray,
                r_lambda: np.ndarray, y0: np.ndarray | None = None,
                max_iters: int = 50, tol: float = 1e-12,
                diagnostics: dict | None = None):
    """GMRES on the Schur complement with two-pass classical Gram-Schmidt.

    Returns (du, dlambda, iterations, residual, converged).  Breakdown of
    the Arnoldi process is treated as lucky termination.  When a dict is
    passed as ``diagnostics`` it receives the per-iteration residual
    history and the Krylov basis built so far.
    """
    m = B.shape[1]
    if y0 is None:
        y0 = np.zeros(m)
    w = inner.solve(r_u)
    b = r_lambda - B.T @ w
    reltol = tol * max(np.linalg.norm(b), np.finfo(float).tiny)

    # initial residual r = b - S y0 = b + B^T A^{-1} B y0
    v = inner.solve(B @ y0)
    r = b + B.T @ v
    beta = np.zeros(max_iters + 1)
    beta[0] = np.linalg.norm(r)
    history = [beta[0]]
    if beta[0] <= reltol:
        if diagnostics is not None:
            diagnostics["residuals"] = history
            diagnostics["Q"] = np.zeros((m, 0))
        du = inner.solve(r_u - B @ y0)
        return du, y0.copy(), 0, beta[0], True

    Q = np.zeros((m, max_iters + 1))
    H = np.zeros((max_iters + 1, max_iters))
    cs = np.zeros(max_iters)
    sn = np.zeros(max_iters)
    Q[:, 0] = r / beta[0]

    j = 0
    res = beta[0]
    converged = False
    for j in range(max_iters):
        r = schur_product(inner, B, Q[:, j])
        for _ in range(2):  # two-pass classical Gram-Schmidt
            c = Q[:, :j + 1].T @ r
            r = r - Q[:, :j + 1] @ c
            H[:j + 1, j] += c
        H[j + 1, j] = np.linalg.norm(r)
        lucky = H[j + 1, j] == 0.0
        if not lucky:
            Q[:, j + 1] = r / H[j + 1, j]
        for i in range(j):
            t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
            H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
            H[i, j] = t
        if lucky and H[j, j] == 0.0:
            j -= 1
            converged = True
            break
        cs[j], sn[j], H[j, j] = givens(H[j, j], H[j + 1, j])
        H[j + 1, j] = 0.0
        beta[j + 1] = -sn[j] * beta[j]
        beta[j] = cs[j] * beta[j]
        res = abs(beta[j + 1])
        history.append(res)
        if res <= reltol or lucky:
            converged = True
            break

    k = j + 1  # size of the least-squares system
    if diagnostics is not None:
        diagnostics["residuals"] = history
        diagnostics["Q"] = Q[:, :k].copy()
    z = np.zeros(k)
    for i in range(k - 1, -1, -1):
        z[i] = (beta[i] - H[i, i + 1:k] @ z[i + 1:k]) / H[i, i]
    y = y0 + Q[:, :k] @ z
    du = inner.solve(r_u - B @ y)
    return du, y, k, res, converged
