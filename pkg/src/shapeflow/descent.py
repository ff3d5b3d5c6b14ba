"""Constrained descent-direction subproblem.

Given the nodal shape sensitivity G, the descent field u minimizes

    (1/p) * integral (Du : Du)^(p/2) + sigma * G.u

subject to the deformed domain keeping its volume and barycenter,
enforced through Lagrange multipliers.  Newton's method on the optimality
system produces a saddle-point problem per iteration; a continuation in
the exponent p warm-starts each stage with the previous solution.

The displacement is a P1 vector field, so all gradient quantities are
elementwise constant and the constraint integrals are evaluated in closed
form per element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, Marker
from .saddle import SaddlePointSystem, build_inner_solver, solve_saddle_direct

_M_P1 = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


class DescentError(Exception):
    pass


class SingularConfigurationError(DescentError):
    """det(I + Du) <= 0 on some element."""


class NonconvergenceError(DescentError):
    pass


@dataclass
class DescentState:
    u: np.ndarray          # (n_nodes, 2) displacement
    lam: np.ndarray        # (3,) multipliers: barycenter x, y, volume
    p: float
    sigma: float


@dataclass
class ConstraintValue:
    g: np.ndarray  # (3,): barycenter residuals, volume residual

    @property
    def norm_inf(self) -> float:
        return float(np.abs(self.g).max())


class P1Geometry:
    """Per-element constant data reused across assemblies on one mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        p = mesh.nodes[mesh.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.area = 0.5 * det
        Jit = np.empty((mesh.n_triangles, 2, 2))  # inverse transpose of J
        Jit[:, 0, 0] = d2[:, 1]
        Jit[:, 0, 1] = -d1[:, 1]
        Jit[:, 1, 0] = -d2[:, 0]
        Jit[:, 1, 1] = d1[:, 0]
        Jit /= det[:, None, None]
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        # physical gradients of the three hat functions per element
        self.gphi = np.einsum("tij,aj->tai", Jit, ref)
        self.centroid = p.mean(axis=1)
        self.free_mask = self._free_mask()

    def _free_mask(self) -> np.ndarray:
        fixed = self.mesh.marked_nodes(Marker.INFLOW, Marker.OUTFLOW,
                                       Marker.WALL)
        mask = np.ones(self.mesh.n_nodes, dtype=bool)
        mask[fixed] = False
        return np.concatenate([mask, mask])

    def jacobians(self, u: np.ndarray):
        """Du, DF = I + Du, det(DF) and DF^{-T} per element."""
        uloc = u[self.mesh.triangles]  # (m, 3, 2)
        Du = np.einsum("taj,tai->tij", self.gphi, uloc)
        DF = Du.copy()
        DF[:, 0, 0] += 1.0
        DF[:, 1, 1] += 1.0
        detF = DF[:, 0, 0] * DF[:, 1, 1] - DF[:, 0, 1] * DF[:, 1, 0]
        DFit = np.empty_like(DF)
        DFit[:, 0, 0] = DF[:, 1, 1]
        DFit[:, 0, 1] = -DF[:, 1, 0]
        DFit[:, 1, 0] = -DF[:, 0, 1]
        DFit[:, 1, 1] = DF[:, 0, 0]
        DFit /= detF[:, None, None]
        return Du, DF, detF, DFit


def _flat(u: np.ndarray) -> np.ndarray:
    """(n, 2) nodal field -> blocked dof vector [ux; uy]."""
    return np.concatenate([u[:, 0], u[:, 1]])


def _unflat(v: np.ndarray) -> np.ndarray:
    n = v.size // 2
    return np.column_stack([v[:n], v[n:]])


def _check_det(detF: np.ndarray) -> None:
    if detF.min() <= 0.0:
        raise SingularConfigurationError(
            f"det(I + Du) = {detF.min():.3e} on element {int(np.argmin(detF))}")


def constraint_values(mesh: Mesh, u: np.ndarray,
                      geo: P1Geometry | None = None) -> ConstraintValue:
    """Barycenter and volume residuals of the deformed wetted domain."""
    geo = geo or P1Geometry(mesh)
    _, _, detF, _ = geo.jacobians(u)
    uloc = u[mesh.triangles]
    xu_mean = geo.centroid + uloc.mean(axis=1)
    g = np.empty(3)
    g[:2] = np.einsum("t,t,ti->i", detF, geo.area, xu_mean)
    g[2] = float(np.sum((detF - 1.0) * geo.area))
    return ConstraintValue(g=g)


def lagrangian_value(mesh: Mesh, u: np.ndarray, lam: np.ndarray, sigma: float,
                     G: np.ndarray, p: float,
                     geo: P1Geometry | None = None) -> float:
    """Scalar value of the constrained descent Lagrangian (test oracle and
    diagnostics; the solvers only use its derivatives)."""
    geo = geo or P1Geometry(mesh)
    Du, _, detF, _ = geo.jacobians(u)
    _check_det(detF)
    norm2 = np.einsum("tij,tij->t", Du, Du)
    val = float(np.sum(geo.area * norm2 ** (p / 2.0)) / p)
    val += sigma * float(np.sum(G * u))
    g = constraint_values(mesh, u, geo).g
    # the volume constraint enters without the -|Omega| shift cancelled: g
    # already holds the residual, which is what the multipliers act on
    return val + float(lam @ g)


def assemble_constraint_jacobian(mesh: Mesh, u: np.ndarray,
                                 geo: P1Geometry | None = None) -> np.ndarray:
    """Dense constraint Jacobian B (2 n_nodes x 3).

    Column k < 2 is the derivative of the barycenter residual g_k, the
    last column that of the volume residual; rows of constrained
    (inflow/outflow/wall) dofs are zeroed.
    """
    geo = geo or P1Geometry(mesh)
    _, _, detF, DFit = geo.jacobians(u)
    _check_det(detF)
    mesh_tris = mesh.triangles
    uloc = u[mesh_tris]
    xu_mean = geo.centroid + uloc.mean(axis=1)
    Ta = np.einsum("tjk,tak->taj", DFit, geo.gphi)  # tr(DF^-1 D(phi_a e_j))

    n = mesh.n_nodes
    B = np.zeros((2 * n, 3))
    w_vol = detF * geo.area                      # det * |K|
    # volume column: integral of Ta_j * det over each element
    vol_loc = Ta * w_vol[:, None, None]
    # barycenter column k: integral of phi_a delta_jk det + (x+u)_k Ta_j det
    bar_loc = np.einsum("taj,tk->tajk", Ta, xu_mean * w_vol[:, None])
    phi_int = (w_vol / 3.0)
    for j in range(2):
        col = np.zeros((mesh.n_triangles, 3, 3))
        col[:, :, :2] = bar_loc[:, :, j, :]
        col[:, :, j] += phi_int[:, None]
        col[:, :, 2] = vol_loc[:, :, j]
        np.add.at(B, mesh_tris + j * n, col)
    B[~geo.free_mask] = 0.0
    return B


def assemble_defect(mesh: Mesh, u: np.ndarray, lam: np.ndarray, sigma: float,
                    G: np.ndarray, p: float,
                    geo: P1Geometry | None = None,
                    B: np.ndarray | None = None):
    """Negative first derivatives of the Lagrangian: (r_u, r_lambda).

    ``G`` is the nodal shape sensitivity as an (n_nodes, 2) array.
    """
    geo = geo or P1Geometry(mesh)
    Du, _, detF, _ = geo.jacobians(u)
    _check_det(detF)
    if B is None:
        B = assemble_constraint_jacobian(mesh, u, geo)
    norm2 = np.einsum("tij,tij->t", Du, Du)
    fac = np.where(norm2 > 0.0, norm2, 1.0) ** ((p - 2.0) / 2.0)
    fac = np.where(norm2 > 0.0, fac, 0.0) * geo.area
    Dug = np.einsum("tij,taj->tai", Du, geo.gphi)
    ploc = Dug * fac[:, None, None]
    n = mesh.n_nodes
    r = np.zeros(2 * n)
    for j in range(2):
        np.add.at(r, mesh.triangles + j * n, ploc[:, :, j])
    r += sigma * _flat(np.asarray(G))
    r += B @ lam
    r_u = -r
    r_u[~geo.free_mask] = 0.0
    r_lam = -constraint_values(mesh, u, geo).g
    return r_u, r_lam


def assemble_hessian(mesh: Mesh, u: np.ndarray, lam: np.ndarray, p: float,
                     eps: float, geo: P1Geometry | None = None) -> sp.csr_matrix:
    """Second derivative of the Lagrangian with the regularized p-term.

    The first p-term factor uses (Du:Du + eps*Theta(4-p))^((p-4)/2) with
    Theta(0) = 1, the second (Du:Du + eps)^((p-2)/2); constrained rows and
    columns are eliminated to identity.
    """
    if eps < 0.0:
        raise ValueError("eps must be non-negative")
    geo = geo or P1Geometry(mesh)
    Du, _, detF, DFit = geo.jacobians(u)
    _check_det(detF)
    norm2 = np.einsum("tij,tij->t", Du, Du)
    theta = 1.0 if p <= 4.0 else 0.0
    base1 = norm2 + eps * theta
    if p == 2.0:
        # the first p-term block carries the factor p - 2 and vanishes
        a1 = np.zeros_like(norm2)
    else:
        if p < 4.0 and np.any(base1 == 0.0):
            raise DescentError("vanishing gradient with eps = 0 and p < 4")
        a1 = (p - 2.0) * base1 ** ((p - 4.0) / 2.0) * geo.area
    a2 = (norm2 + eps) ** ((p - 2.0) / 2.0) * geo.area
    if not (np.all(np.isfinite(a1)) and np.all(np.isfinite(a2))):
        raise DescentError("non-finite p-term coefficients")

    gphi = geo.gphi
    Dug = np.einsum("tij,taj->tai", Du, gphi)     # (Du : D(phi_a e_i))
    Ta = np.einsum("tjk,tak->taj", DFit, gphi)
    uloc = u[mesh.triangles]
    xu_int = (geo.centroid + uloc.mean(axis=1)) * geo.area[:, None]
    lam_xu = xu_int @ lam[:2]                      # integral of lam.(x+u)
    w_vol = detF * geo.area

    # p-term blocks, indexed [t, a, r, b, s]
    H = np.einsum("t,tar,tbs->tarbs", a1, Dug, Dug)
    gg = np.einsum("tai,tbi->tab", gphi, gphi)
    eye = np.eye(2)
    H += np.einsum("t,tab,rs->tarbs", a2, gg, eye)

    # second-order constraint terms, all times det(DF)
    mixed = detF / 3.0 * geo.area  # integral of phi_a det, any a
    # lam_s * Ta_r * integral(phi_b det): constant in b
    t1 = np.einsum("t,tar,s->tars", mixed, Ta, lam[:2])
    H += t1[:, :, :, None, :]
    # lam_r * Tb_s * integral(phi_a det): constant in a
    t2 = np.einsum("t,tbs,r->trbs", mixed, Ta, lam[:2])
    H += t2[:, None, :, :, :]
    # (lam.(x+u) + lam_vol) * (Ta_r Tb_s - Ta_s Tb_r) * det
    wgt = (lam_xu + lam[2] * geo.area) * detF
    H += np.einsum("t,tar,tbs->tarbs", wgt, Ta, Ta)
    H -= np.einsum("t,tas,tbr->tarbs", wgt, Ta, Ta)

    # local ordering (component r, node a) to match blocked global dofs
    local = H.transpose(0, 2, 1, 4, 3).reshape(-1, 6, 6)
    n = mesh.n_nodes
    sc = mesh.triangles
    dofs = np.hstack([sc, sc + n])
    rows = np.repeat(dofs[:, :, None], 6, axis=2)
    cols = np.repeat(dofs[:, None, :], 6, axis=1)
    A = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(2 * n, 2 * n)).tocsr()
    fixed = np.flatnonzero(~geo.free_mask)
    from .fem import eliminate_rows_cols
    return eliminate_rows_cols(A, fixed)


def det_expansion_coeffs(Dv: np.ndarray, d: int) -> np.ndarray:
    """Coefficients f_k of det(I + t*Dv) as a polynomial in t.

    d = 2: [1, trace, det]; d = 3 additionally carries the sum of the
    principal 2x2 minors as the t^2 coefficient.
    """
    Dv = np.asarray(Dv, dtype=float)
    if d == 2:
        if Dv.shape != (2, 2):
            raise ValueError("expected a 2x2 matrix")
        return np.array([1.0, Dv[0, 0] + Dv[1, 1], np.linalg.det(Dv)])
    if d == 3:
        if Dv.shape != (3, 3):
            raise ValueError("expected a 3x3 matrix")
        tr = Dv.trace()
        minors = 0.0
        for i in range(3):
            idx = [k for k in range(3) if k != i]
            sub = Dv[np.ix_(idx, idx)]
            minors += sub[0, 0] * sub[1, 1] - sub[0, 1] * sub[1, 0]
        return np.array([1.0, tr, minors, np.linalg.det(Dv)])
    raise ValueError(f"unsupported dimension {d}")


def w1p_norm(mesh: Mesh, u: np.ndarray, p: float,
             geo: P1Geometry | None = None) -> float:
    """L^p norm plus L^p gradient seminorm of a P1 vector field."""
    if p < 1.0:
        raise ValueError("p must be at least 1")
    geo = geo or P1Geometry(mesh)
    Du, _, _, _ = geo.jacobians(u)
    norm2 = np.einsum("tij,tij->t", Du, Du)
    grad_part = float(np.sum(geo.area * norm2 ** (p / 2.0))) ** (1.0 / p)
    from .fem import quadrature_rule
    rule = quadrature_rule(min(10, int(np.ceil(p)) + 1))
    uloc = u[mesh.triangles]  # (m, 3, 2)
    uq = np.einsum("qa,tai->tqi", rule.points, uloc)
    mag = np.sqrt(np.einsum("tqi,tqi->tq", uq, uq))
    val_part = float(np.einsum("q,tq,t->", rule.weights, mag ** p,
                               geo.area)) ** (1.0 / p)
    return val_part + grad_part


@dataclass
class NewtonInfo:
    iterations: int
    final_update: float
    constraint_norm: float


def newton_descent(mesh: Mesh, G: np.ndarray, sigma: float, p: float,
                   u0: np.ndarray | None = None, eps: float = 1e-8,
                   eps2: float = 1e-8, max_iters: int = 50,
                   inner_mode: str = "direct",
                   geo: P1Geometry | None = None):
    """Newton iteration for the constrained descent problem at fixed p.

    Returns (u, lam, NewtonInfo).  The update norm is measured in the sum
    of the W^{1,p} norm of du and the euclidean norm of dlambda; element
    inversion triggers up to ten halvings of the step.
    """
    geo = geo or P1Geometry(mesh)
    u = np.zeros((mesh.n_nodes, 2)) if u0 is None else u0.copy()
    lam = np.zeros(3)
    G = np.asarray(G)
    for it in range(1, max_iters + 1):
        B = assemble_constraint_jacobian(mesh, u, geo)
        r_u, r_lam = assemble_defect(mesh, u, lam, sigma, G, p, geo, B=B)
        A = assemble_hessian(mesh, u, lam, p, eps, geo)
        inner = build_inner_solver(A, mode=inner_mode)
        du, dlam = solve_saddle_direct(
            SaddlePointSystem(A=A, B=B, r_u=r_u, r_lambda=r_lam), inner)
        du_field = _unflat(du)
        scale = 1.0
        for _ in range(30):
            trial = u + scale * du_field
            _, _, detF, _ = geo.jacobians(trial)
            if detF.min() > 0.0:
                break
            scale *= 0.5
        else:
            raise SingularConfigurationError(
                "Newton step inverts elements even after 30 halvings")
        u = u + scale * du_field
        lam = lam + scale * dlam
        update = w1p_norm(mesh, scale * du_field, p, geo) \
            + np.linalg.norm(scale * dlam)
        if update < eps2:
            gres = constraint_values(mesh, u, geo).norm_inf
            return u, lam, NewtonInfo(iterations=it, final_update=update,
                                      constraint_norm=gres)
    raise NonconvergenceError(
        f"descent Newton did not converge in {max_iters} iterations "
        f"(last update {update:.3e}, p={p})")


def p_stages(p_init: float, p_inc: float, p_max: float) -> list:
    """Exponent sequence p_init, p_init + p_inc, ... with the final stage
    clamped to exactly p_max."""
    if p_inc <= 0.0:
        raise ValueError("p_inc must be positive")
    if p_max < p_init:
        raise ValueError("p_max must be at least p_init")
    ps = []
    k = 0
    while True:
        pk = p_init + k * p_inc
        if pk >= p_max - 1e-12:
            break
        ps.append(pk)
        k += 1
    ps.append(p_max)
    return ps


def p_continuation(mesh: Mesh, G: np.ndarray, sigma: float,
                   p_init: float = 2.0, p_inc: float = 0.19,
                   p_max: float = 4.8, eps: float = 1e-8, eps2: float = 1e-8,
                   max_iters: int = 50, inner_mode: str = "direct",
                   geo: P1Geometry | None = None):
    """Solve the descent problem for increasing p, warm starting each stage
    with the previous solution.  Returns (u, lam, per-stage NewtonInfo)."""
    geo = geo or P1Geometry(mesh)
    u = np.zeros((mesh.n_nodes, 2))
    lam = np.zeros(3)
    infos = []
    for pk in p_stages(p_init, p_inc, p_max):
        try:
            u, lam, info = newton_descent(mesh, G, sigma, pk, u0=u, eps=eps,
                                          eps2=eps2, max_iters=max_iters,
                                          inner_mode=inner_mode, geo=geo)
        except DescentError as exc:
            raise NonconvergenceError(f"stage p={pk:.4g} failed: {exc}") from exc
        infos.append((pk, info))
    return u, lam, infos
