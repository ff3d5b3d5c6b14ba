"""Finite element kernels shared by the flow and descent solvers.

P1 and P2 Lagrange spaces on triangles, conical-product quadrature,
element geometry, generic sparse assembly and symmetric Dirichlet
elimination.  Assembled matrices are scipy CSR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi
from numpy.polynomial.legendre import leggauss


class FemError(Exception):
    pass


class DegenerateElementError(FemError):
    pass


class AssemblyError(FemError):
    pass


# ---------------------------------------------------------------------------
# quadrature

@dataclass
class QuadratureRule:
    """Points in barycentric coordinates, weights summing to one.

    The reference-triangle measure 1/2 is applied by the integrators, so
    ``integral = (det/2) * sum(w_q * f_q)`` on an affine element.
    """

    points: np.ndarray   # (nq, 3)
    weights: np.ndarray  # (nq,)
    degree: int


def _monomial_integral(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle."""
    from math import factorial
    return factorial(a) * factorial(b) / factorial(a + b + 2)


def quadrature_rule(degree: int) -> QuadratureRule:
    """Conical-product Gauss rule exact up to the requested degree.

    All weights are positive; exactness is verified at construction
    against the analytic monomial integrals.
    """
    if not 1 <= degree <= 10:
        raise ValueError(f"unsupported quadrature degree {degree}")
    n = (degree + 2) // 2
    # x-direction: Gauss-Jacobi with weight (1 - x), y-direction: Gauss-Legendre
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    xj = 0.5 * (xj + 1.0)
    wj = wj / 4.0  # map [-1,1] -> [0,1] and absorb the Jacobi weight scaling
    xl, wl = leggauss(n)
    xl = 0.5 * (xl + 1.0)
    wl = 0.5 * wl
    xs = np.repeat(xj, n)
    ys = np.tile(xl, n) * (1.0 - xs)
    w = (np.repeat(wj, n) * np.tile(wl, n))
    w = w / w.sum()  # weights sum to one; measure 1/2 applied separately
    bary = np.column_stack([1.0 - xs - ys, xs, ys])
    rule = QuadratureRule(points=bary, weights=w, degree=degree)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            approx = 0.5 * np.sum(w * xs ** a * ys ** b)
            if abs(approx - _monomial_integral(a, b)) > 1e-14:
                raise AssemblyError(f"quadrature rule degree {degree} fails "
                                    f"on monomial x^{a} y^{b}")
    return rule


# ---------------------------------------------------------------------------
# reference basis functions

def p1_tabulate(bary: np.ndarray):
    """Values and reference gradients of the three P1 basis functions."""
    vals = bary.T.copy()  # (3, nq)
    grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = np.broadcast_to(grads[:, None, :], (3, len(bary), 2)).copy()
    return vals, grads


def p2_tabulate(bary: np.ndarray):
    """Values and reference gradients of the six P2 basis functions.

    Ordering: the three vertices, then the midpoints of edges (1,2),
    (2,0), (0,1), i.e. midpoint k is opposite vertex k.
    """
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    vals = np.stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1,
    ])
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # grad of l0,l1,l2
    lam = [l0, l1, l2]
    grads = np.empty((6, len(bary), 2))
    for i in range(3):
        grads[i] = np.outer(4 * lam[i] - 1, dl[i])
    pairs = [(1, 2), (2, 0), (0, 1)]
    for k, (i, j) in enumerate(pairs):
        grads[3 + k] = 4 * (np.outer(lam[j], dl[i]) + np.outer(lam[i], dl[j]))
    return vals, grads


# ---------------------------------------------------------------------------
# geometry

def element_geometry(coords: np.ndarray):
    """Affine map data for one triangle: Jacobian, determinant and its
    inverse transpose.  ``det`` equals twice the triangle area."""
    J = np.column_stack([coords[1] - coords[0], coords[2] - coords[0]])
    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    if det <= 0.0:
        raise DegenerateElementError(f"element has det {det:.3e}")
    Jit = np.array([[J[1, 1], -J[1, 0]], [-J[0, 1], J[0, 0]]]) / det
    return J, det, Jit


def all_element_geometry(nodes: np.ndarray, triangles: np.ndarray):
    """Vectorized :func:`element_geometry` over all triangles."""
    p = nodes[triangles]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if det.size and det.min() <= 0.0:
        raise DegenerateElementError(
            f"element {int(np.argmin(det))} has det {det.min():.3e}")
    Jit = np.empty_like(J)
    Jit[:, 0, 0] = J[:, 1, 1]
    Jit[:, 0, 1] = -J[:, 1, 0]
    Jit[:, 1, 0] = -J[:, 0, 1]
    Jit[:, 1, 1] = J[:, 0, 0]
    Jit /= det[:, None, None]
    return J, det, Jit


def build_edges(triangles: np.ndarray):
    """Unique undirected edges and the per-triangle edge index table.

    ``tri_edges[t, k]`` is the edge opposite local vertex k, matching the
    P2 midpoint ordering of :func:`p2_tabulate`.
    """
    raw = np.concatenate([triangles[:, [1, 2]], triangles[:, [2, 0]],
                          triangles[:, [0, 1]]])
    raw = np.sort(raw, axis=1)
    edges, inv = np.unique(raw, axis=0, return_inverse=True)
    tri_edges = inv.reshape(3, -1).T
    return edges, tri_edges


# ---------------------------------------------------------------------------
# function spaces

class FunctionSpace:
    """P1 scalar ('p1'), P1 vector ('p1v'), P2 scalar ('p2') or P2 vector
    ('p2v') Lagrange space on a triangle mesh.

    Vector dofs are blocked by component: dof i has component
    ``i // n_scalar`` and scalar index ``i % n_scalar``.
    """

    def __init__(self, mesh, kind: str):
        if kind not in ("p1", "p1v", "p2", "p2v"):
            raise ValueError(f"unknown space kind {kind!r}")
        self.mesh = mesh
        self.kind = kind
        self.order = 2 if kind.startswith("p2") else 1
        self.components = 2 if kind.endswith("v") else 1
        if self.order == 2:
            self.edges, self.tri_edges = build_edges(mesh.triangles)
            self.n_scalar = mesh.n_nodes + len(self.edges)
        else:
            self.edges, self.tri_edges = None, None
            self.n_scalar = mesh.n_nodes
        self.n_dofs = self.components * self.n_scalar
        self.n_local_scalar = 6 if self.order == 2 else 3
        self.n_local = self.components * self.n_local_scalar

    def scalar_cells(self) -> np.ndarray:
        """(m, n_local_scalar) global scalar-dof ids per triangle."""
        if self.order == 1:
            return self.mesh.triangles
        return np.hstack([self.mesh.triangles,
                          self.mesh.n_nodes + self.tri_edges])

    def cell_dofs(self) -> np.ndarray:
        """(m, n_local) global dof ids per triangle, components blocked."""
        sc = self.scalar_cells()
        if self.components == 1:
            return sc
        return np.hstack([sc, sc + self.n_scalar])

    def tabulate(self, bary: np.ndarray):
        if self.order == 1:
            return p1_tabulate(bary)
        return p2_tabulate(bary)

    def dof_coordinates(self) -> np.ndarray:
        """(n_scalar, 2) coordinates of the scalar dofs (nodes, then edge
        midpoints for P2)."""
        if self.order == 1:
            return self.mesh.nodes
        mids = 0.5 * (self.mesh.nodes[self.edges[:, 0]]
                      + self.mesh.nodes[self.edges[:, 1]])
        return np.vstack([self.mesh.nodes, mids])


# ---------------------------------------------------------------------------
# assembly

def assemble_operator(space_row: FunctionSpace, space_col: FunctionSpace,
                      element_kernel) -> sp.csr_matrix:
    """Sum of scattered local blocks.

    ``element_kernel(t, coords)`` must return the dense local block of
    shape (row n_local, col n_local) for triangle ``t`` with vertex
    coordinates ``coords``.
    """
    mesh = space_row.mesh
    rows_d = space_row.cell_dofs()
    cols_d = space_col.cell_dofs()
    nr, nc = space_row.n_local, space_col.n_local
    m = mesh.n_triangles
    data = np.empty((m, nr, nc))
    for t in range(m):
        block = np.asarray(element_kernel(t, mesh.nodes[mesh.triangles[t]]))
        if not np.all(np.isfinite(block)):
            raise AssemblyError(f"kernel produced non-finite values on element {t}")
        data[t] = block
    rows = np.repeat(rows_d[:, :, None], nc, axis=2)
    cols = np.repeat(cols_d[:, None, :], nr, axis=1)
    A = sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(space_row.n_dofs, space_col.n_dofs))
    return A.tocsr()


def assemble_functional(space: FunctionSpace, element_kernel) -> np.ndarray:
    """Linear-functional counterpart of :func:`assemble_operator`."""
    mesh = space.mesh
    dofs = space.cell_dofs()
    out = np.zeros(space.n_dofs)
    for t in range(mesh.n_triangles):
        local = np.asarray(element_kernel(t, mesh.nodes[mesh.triangles[t]]))
        if not np.all(np.isfinite(local)):
            raise AssemblyError(f"kernel produced non-finite values on element {t}")
        np.add.at(out, dofs[t], local)
    return out


def mass_kernel(space: FunctionSpace, degree: int = 4):
    """Element kernel for the (scalar or block-diagonal vector) mass matrix."""
    rule = quadrature_rule(degree)
    vals, _ = space.tabulate(rule.points)
    base = np.einsum("q,aq,bq->ab", rule.weights, vals, vals)

    def kernel(t, coords):
        _, det, _ = element_geometry(coords)
        block = base * (det / 2.0)
        if space.components == 2:
            z = np.zeros_like(block)
            block = np.block([[block, z], [z, block]])
        return block

    return kernel


def stiffness_kernel(space: FunctionSpace, degree: int = 2):
    """Element kernel for the Laplace stiffness matrix."""
    rule = quadrature_rule(degree)
    _, grads = space.tabulate(rule.points)

    def kernel(t, coords):
        _, det, Jit = element_geometry(coords)
        g = np.einsum("ij,aqj->aqi", Jit, grads)
        block = np.einsum("q,aqi,bqi->ab", rule.weights, g, g) * (det / 2.0)
        if space.components == 2:
            z = np.zeros_like(block)
            block = np.block([[block, z], [z, block]])
        return block

    return kernel


def apply_dirichlet(matrix: sp.spmatrix, rhs: np.ndarray, dofs: np.ndarray,
                    values: np.ndarray):
    """Symmetric elimination of constrained dofs.

    Rows and columns are zeroed, the diagonal is set to one, and the rhs
    absorbs the known column contributions.  Returns the new (matrix, rhs)
    pair; symmetry of the input is preserved.
    """
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    order = np.argsort(dofs, kind="stable")
    ds, vs = dofs[order], values[order]
    uniq, first = np.unique(ds, return_index=True)
    if len(uniq) != len(ds):
        for d in uniq:
            vv = vs[ds == d]
            if np.ptp(vv) != 0.0:
                raise ValueError(f"conflicting Dirichlet values for dof {d}")
        ds, vs = uniq, vs[first]
    n = matrix.shape[0]
    constrained = np.zeros(n, dtype=bool)
    constrained[ds] = True
    full = np.zeros(n)
    full[ds] = vs

    A = matrix.tocoo()
    rhs = rhs.copy()
    # rhs correction: entries with a constrained column and free row
    sel = constrained[A.col] & ~constrained[A.row]
    np.subtract.at(rhs, A.row[sel], A.data[sel] * full[A.col[sel]])
    keep = ~constrained[A.row] & ~constrained[A.col]
    A2 = sp.coo_matrix((A.data[keep], (A.row[keep], A.col[keep])), shape=A.shape)
    eye = sp.coo_matrix((np.ones(len(ds)), (ds, ds)), shape=A.shape)
    rhs[ds] = vs
    return (A2 + eye).tocsr(), rhs


def eliminate_rows_cols(matrix: sp.spmatrix, dofs: np.ndarray) -> sp.csr_matrix:
    """Zero the given rows and columns and put ones on their diagonal.

    Homogeneous variant of :func:`apply_dirichlet` without a rhs.
    """
    n = matrix.shape[0]
    constrained = np.zeros(n, dtype=bool)
    constrained[np.asarray(dofs, dtype=np.int64)] = True
    A = matrix.tocoo()
    keep = ~constrained[A.row] & ~constrained[A.col]
    A2 = sp.coo_matrix((A.data[keep], (A.row[keep], A.col[keep])), shape=A.shape)
    idx = np.flatnonzero(constrained)
    eye = sp.coo_matrix((np.ones(len(idx)), (idx, idx)), shape=A.shape)
    return (A2 + eye).tocsr()


def evaluate_field(space: FunctionSpace, coeffs: np.ndarray, tri: int,
                   bary: np.ndarray):
    """Value and gradient of a finite element field at one barycentric
    point of a triangle.

    Scalar spaces return (value, grad (2,)); vector spaces return
    (value (2,), jacobian (2, 2)) with rows indexed by component.
    """
    if coeffs.shape[0] != space.n_dofs:
        raise ValueError("coefficient vector length mismatch")
    mesh = space.mesh
    if not 0 <= tri < mesh.n_triangles:
        raise IndexError(f"triangle {tri} out of range")
    pts = np.asarray(bary, dtype=float).reshape(1, 3)
    vals, grads = space.tabulate(pts)
    _, _, Jit = element_geometry(mesh.nodes[mesh.triangles[tri]])
    g_phys = np.einsum("ij,aj->ai", Jit, grads[:, 0, :])
    sc = space.scalar_cells()[tri]
    if space.components == 1:
        local = coeffs[sc]
        return float(vals[:, 0] @ local), g_phys.T @ local
    value = np.empty(2)
    jac = np.empty((2, 2))
    for c in range(2):
        local = coeffs[sc + c * space.n_scalar]
        value[c] = vals[:, 0] @ local
        jac[c] = g_phys.T @ local
    return value, jac
