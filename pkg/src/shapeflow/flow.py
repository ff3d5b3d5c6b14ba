"""Stationary incompressible Navier-Stokes on Taylor-Hood elements.

State and adjoint solvers, the energy-dissipation objective and the fully
discrete shape gradient: the derivative of the reduced objective with
respect to the mesh vertex coordinates, obtained by differentiating every
element integral through the affine map (Jacobian, determinant, inverse
transpose) and combining with the discrete adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (FunctionSpace, all_element_geometry, eliminate_rows_cols,
                  p1_tabulate, p2_tabulate, quadrature_rule)
from .mesh import Marker, Mesh


class FlowError(Exception):
    pass


class FlowNonconvergenceError(FlowError):
    pass


def inflow_profile(x: np.ndarray, delta: float) -> np.ndarray:
    """Horizontal inflow with unit peak at the channel center:
    (max{0, cos(pi |y| / delta)}, 0)."""
    if delta <= 0.0:
        raise ValueError("inlet height must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    out[:, 0] = np.maximum(0.0, np.cos(np.pi * np.abs(x[:, 1]) / delta))
    return out if out.shape[0] > 1 else out[0]


@dataclass
class FlowProblem:
    """Navier-Stokes setup on a marked mesh.

    ``bc`` maps markers to velocity Dirichlet callables (x -> (2,));
    markers absent from the map get the natural do-nothing condition.
    ``forcing`` is an optional volumetric momentum source (used by the
    manufactured-solution tests).  ``pin_pressure`` fixes the first
    pressure dof, needed when no natural boundary is present.
    """

    mesh: Mesh
    nu: float
    bc: dict
    forcing: object = None
    pin_pressure: bool = False
    pin_value: float = 0.0


def benchmark_problem(mesh: Mesh, nu: float, inlet_height: float) -> FlowProblem:
    zero = lambda x: np.zeros(np.atleast_2d(x).shape) if np.ndim(x) > 1 \
        else np.zeros(2)
    return FlowProblem(
        mesh=mesh, nu=nu,
        bc={Marker.INFLOW: lambda x: inflow_profile(x, inlet_height),
            Marker.WALL: zero, Marker.OBSTACLE: zero})


class TaylorHood:
    """Cached P2-P1 discretization data for one mesh.

    Dof layout: [vx (n2), vy (n2), q (n1)] with n2 the scalar P2 dimension
    (nodes + edges) and n1 the node count.
    """

    def __init__(self, mesh: Mesh, degree: int = 6):
        self.mesh = mesh
        self.space_v = FunctionSpace(mesh, "p2v")
        self.n2 = self.space_v.n_scalar
        self.n1 = mesh.n_nodes
        self.n_dofs = 2 * self.n2 + self.n1
        self.rule = quadrature_rule(degree)
        self.vals2, ref2 = p2_tabulate(self.rule.points)
        self.vals1, _ = p1_tabulate(self.rule.points)
        _, self.det, self.Jit = all_element_geometry(mesh.nodes, mesh.triangles)
        # physical P2 gradients per element and quadrature point
        self.g2 = np.einsum("tij,aqj->taqi", self.Jit, ref2)
        self.wdet = np.outer(self.det, self.rule.weights) / 2.0  # (m, nq)
        self.sc2 = self.space_v.scalar_cells()
        self.cells15 = np.hstack([self.sc2, self.sc2 + self.n2,
                                  2 * self.n2 + mesh.triangles])
        # physical quadrature points, for forcing terms
        bary = self.rule.points
        self.xq = np.einsum("qa,tai->tqi", bary, mesh.nodes[mesh.triangles])

    # -- field evaluation at quadrature points ---------------------------
    def velocity_local(self, y: np.ndarray) -> np.ndarray:
        out = np.empty((self.mesh.n_triangles, 6, 2))
        out[:, :, 0] = y[self.sc2]
        out[:, :, 1] = y[self.sc2 + self.n2]
        return out

    def at_quadrature(self, y: np.ndarray):
        """Values and gradients of velocity and pressure at all qps."""
        Vloc = self.velocity_local(y)
        vq = np.einsum("aq,tai->tqi", self.vals2, Vloc)
        Dv = np.einsum("taqj,tai->tqij", self.g2, Vloc)
        qloc = y[2 * self.n2 + self.mesh.triangles]
        qq = np.einsum("aq,ta->tq", self.vals1, qloc)
        return vq, Dv, qq


def dirichlet_data(th: TaylorHood, problem: FlowProblem):
    """Velocity Dirichlet dofs and values, markers applied in a fixed
    priority order so no-slip wins over the inflow profile at corners."""
    mesh = th.mesh
    edge_index = {tuple(e): i for i, e in
                  enumerate(map(tuple, th.space_v.edges))}
    assignments: dict = {}
    order = [Marker.OUTFLOW, Marker.INFLOW, Marker.WALL, Marker.OBSTACLE]
    for marker in order:
        if marker not in problem.bc:
            continue
        fn = problem.bc[marker]
        sel = mesh.boundary_markers == marker
        for u, v in mesh.boundary_edges[sel]:
            eid = edge_index[(min(u, v), max(u, v))]
            mid = 0.5 * (mesh.nodes[u] + mesh.nodes[v])
            for scalar_dof, x in ((u, mesh.nodes[u]), (v, mesh.nodes[v]),
                                  (mesh.n_nodes + eid, mid)):
                val = np.asarray(fn(x), dtype=float).reshape(2)
                assignments[scalar_dof] = val
    dofs, values = [], []
    for sdof, val in sorted(assignments.items()):
        dofs.extend((sdof, sdof + th.n2))
        values.extend(val)
    if problem.pin_pressure:
        dofs.append(2 * th.n2)
        values.append(problem.pin_value)
    return np.array(dofs, dtype=np.int64), np.array(values)


def assemble_ns_residual(th: TaylorHood, problem: FlowProblem, y: np.ndarray,
                         conv_scale: float = 1.0) -> np.ndarray:
    """Galerkin residual of the weak form (no Dirichlet treatment)."""
    nu = problem.nu
    vq, Dv, qq = th.at_quadrature(y)
    conv = np.einsum("tqj,tqij->tqi", vq, Dv)
    divv = Dv[:, :, 0, 0] + Dv[:, :, 1, 1]
    wdet = th.wdet

    Rv = nu * np.einsum("tq,tqij,taqj->tai", wdet, Dv, th.g2)
    Rv += conv_scale * np.einsum("tq,tqi,aq->tai", wdet, conv, th.vals2)
    Rv -= np.einsum("tq,tq,taqi->tai", wdet, qq, th.g2)
    if problem.forcing is not None:
        fq = np.asarray(problem.forcing(th.xq.reshape(-1, 2)))
        fq = fq.reshape(th.xq.shape)
        Rv -= np.einsum("tq,tqi,aq->tai", wdet, fq, th.vals2)
    Rp = np.einsum("tq,bq,tq->tb", wdet, th.vals1, divv)

    R = np.zeros(th.n_dofs)
    np.add.at(R, th.sc2, Rv[:, :, 0])
    np.add.at(R, th.sc2 + th.n2, Rv[:, :, 1])
    np.add.at(R, 2 * th.n2 + th.mesh.triangles, Rp)
    if not np.all(np.isfinite(R)):
        raise FlowError("non-finite entries in the flow residual")
    return R


def assemble_ns_jacobian(th: TaylorHood, problem: FlowProblem, y: np.ndarray,
                         conv_scale: float = 1.0) -> sp.csr_matrix:
    """Exact derivative of the discrete residual with respect to y."""
    nu = problem.nu
    vq, Dv, _ = th.at_quadrature(y)
    wdet = th.wdet

    gg = np.einsum("tq,taqk,tbqk->tab", wdet, th.g2, th.g2)
    c1 = conv_scale * np.einsum("tq,aq,bq,tqij->tabij", wdet, th.vals2,
                                th.vals2, Dv)
    c2 = conv_scale * np.einsum("tq,aq,tqj,tbqj->tab", wdet, th.vals2,
                                vq, th.g2)
    bp = np.einsum("tq,bq,taqi->taib", wdet, th.vals1, th.g2)

    m = th.mesh.n_triangles
    loc = np.zeros((m, 15, 15))
    eye = np.eye(2)
    for i in range(2):
        for j in range(2):
            block = c1[:, :, :, i, j]
            if i == j:
                block = block + nu * gg + c2
            loc[:, i * 6:(i + 1) * 6, j * 6:(j + 1) * 6] = block
        loc[:, i * 6:(i + 1) * 6, 12:15] = -bp[:, :, i, :]
        loc[:, 12:15, i * 6:(i + 1) * 6] = bp[:, :, i, :].transpose(0, 2, 1)

    rows = np.repeat(th.cells15[:, :, None], 15, axis=2)
    cols = np.repeat(th.cells15[:, None, :], 15, axis=1)
    A = sp.coo_matrix((loc.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(th.n_dofs, th.n_dofs))
    return A.tocsr()


@dataclass
class FlowState:
    y: np.ndarray
    nu: float
    residual_norm: float
    newton_iters: int
    problem: FlowProblem = field(repr=False)
    th: TaylorHood = field(repr=False)

    def velocity_nodal(self) -> np.ndarray:
        """Velocity sampled at the mesh vertices (for VTK export)."""
        n = self.th.mesh.n_nodes
        return np.column_stack([self.y[:n], self.y[self.th.n2:self.th.n2 + n]])

    def pressure_nodal(self) -> np.ndarray:
        return self.y[2 * self.th.n2:]


@dataclass
class AdjointState:
    y: np.ndarray
    residual_norm: float


def solve_flow(problem: FlowProblem, tol: float = 1e-10,
               max_iters: int = 25, th: TaylorHood | None = None) -> FlowState:
    """Newton iteration started from the Stokes solution.

    Terminates when the free-dof residual 2-norm drops below ``tol``
    (absolute); linear solves use a sparse direct factorization.
    """
    th = th or TaylorHood(problem.mesh)
    dofs, values = dirichlet_data(th, problem)
    y = np.zeros(th.n_dofs)
    y[dofs] = values

    def newton_step(conv_scale):
        R = assemble_ns_residual(th, problem, y, conv_scale)
        R[dofs] = 0.0
        J = assemble_ns_jacobian(th, problem, y, conv_scale)
        J = eliminate_rows_cols(J, dofs)
        delta = spla.splu(J.tocsc()).solve(-R)
        return delta, np.linalg.norm(R)

    delta, _ = newton_step(0.0)  # Stokes warm start
    y += delta
    for it in range(1, max_iters + 1):
        R = assemble_ns_residual(th, problem, y)
        R[dofs] = 0.0
        rnorm = np.linalg.norm(R)
        if rnorm <= tol:
            return FlowState(y=y, nu=problem.nu, residual_norm=rnorm,
                             newton_iters=it - 1, problem=problem, th=th)
        J = assemble_ns_jacobian(th, problem, y)
        J = eliminate_rows_cols(J, dofs)
        y += spla.splu(J.tocsc()).solve(-R)
    raise FlowNonconvergenceError(
        f"flow Newton stalled after {max_iters} iterations, "
        f"residual {rnorm:.3e}")


def energy_dissipation(state: FlowState) -> float:
    """Objective (nu/2) * integral Dv : Dv over the wetted domain."""
    th = state.th
    _, Dv, _ = th.at_quadrature(state.y)
    return 0.5 * state.nu * float(
        np.einsum("tq,tqij,tqij->", th.wdet, Dv, Dv))


def _objective_gradient(th: TaylorHood, nu: float, y: np.ndarray) -> np.ndarray:
    """Derivative of the energy dissipation with respect to y."""
    _, Dv, _ = th.at_quadrature(y)
    dv = nu * np.einsum("tq,tqij,taqj->tai", th.wdet, Dv, th.g2)
    out = np.zeros(th.n_dofs)
    np.add.at(out, th.sc2, dv[:, :, 0])
    np.add.at(out, th.sc2 + th.n2, dv[:, :, 1])
    return out


def solve_adjoint(state: FlowState) -> AdjointState:
    """Discrete adjoint: (dR/dy)^T ystar = -(dJ/dy)^T with homogeneous
    conditions on all velocity Dirichlet dofs."""
    th, problem = state.th, state.problem
    dofs, _ = dirichlet_data(th, problem)
    rhs = -_objective_gradient(th, state.nu, state.y)
    rhs[dofs] = 0.0
    J = assemble_ns_jacobian(th, problem, state.y)
    J = eliminate_rows_cols(J, dofs)
    JT = J.T.tocsc()
    ystar = spla.splu(JT).solve(rhs)
    res = np.linalg.norm(JT @ ystar - rhs)
    return AdjointState(y=ystar, residual_norm=res)


def shape_gradient(state: FlowState, adjoint: AdjointState) -> np.ndarray:
    """Derivative of the reduced objective with respect to the vertex
    coordinates, one 2-vector per node.

    Every element integral of the objective and of the residual (weighted
    by the adjoint) is differentiated analytically through the affine
    element map; rows of inflow/outflow/wall nodes are zeroed so the
    functional acts only on admissible deformations.
    """
    th, problem = state.th, state.problem
    if problem.forcing is not None:
        raise FlowError("shape gradient assumes no volumetric forcing")
    nu = state.nu
    vq, Dv, qq = th.at_quadrature(state.y)
    wq_, Dw, qsq = th.at_quadrature(adjoint.y)
    Jit = th.Jit  # (m, 2, 2), per element

    conv = np.einsum("tqj,tqij->tqi", vq, Dv)
    phi = 0.5 * nu * np.einsum("tqij,tqij->tq", Dv, Dv)
    phi += nu * np.einsum("tqij,tqij->tq", Dv, Dw)
    phi += np.einsum("tqi,tqi->tq", conv, wq_)
    phi -= qq * (Dw[:, :, 0, 0] + Dw[:, :, 1, 1])
    phi += qsq * (Dv[:, :, 0, 0] + Dv[:, :, 1, 1])

    # d(phi)/dJ, a 2x2 matrix per element and quadrature point
    M = nu * np.einsum("tqik,tqil->tqkl", Dv, Dv)
    M += nu * np.einsum("tqik,tqil->tqkl", Dv, Dw)
    M += nu * np.einsum("tqik,tqil->tqkl", Dw, Dv)
    dphi = -np.einsum("tqkm,tml->tqkl", M, Jit)
    dphi += qq[:, :, None, None] * np.einsum("tqik,til->tqkl", Dw, Jit)
    dphi -= qsq[:, :, None, None] * np.einsum("tqik,til->tqkl", Dv, Jit)
    dvw = np.einsum("tqik,tqi->tqk", Dv, wq_)
    jv = np.einsum("tml,tqm->tql", Jit, vq)
    dphi -= np.einsum("tqk,tql->tqkl", dvw, jv)

    w = th.rule.weights
    det = th.det
    dPhi = 0.5 * np.einsum("q,t,tqkl->tkl", w, det, dphi)
    dPhi += 0.5 * np.einsum("q,tq,t,tkl->tkl", w, phi, det, Jit)

    # chain rule from the element Jacobian to the three vertices
    n = th.mesh.n_nodes
    G = np.zeros((n, 2))
    tris = th.mesh.triangles
    np.add.at(G, tris[:, 1], dPhi[:, :, 0])
    np.add.at(G, tris[:, 2], dPhi[:, :, 1])
    np.add.at(G, tris[:, 0], -(dPhi[:, :, 0] + dPhi[:, :, 1]))

    fixed = th.mesh.marked_nodes(Marker.INFLOW, Marker.OUTFLOW, Marker.WALL)
    G[fixed] = 0.0
    return G
