"""Unstructured 2D triangle meshes with boundary markers.

Provides the benchmark channel-with-obstacle mesher, uniform (red) refinement
hierarchies, deformation of all hierarchy levels by a nodal displacement
field, Gmsh MSH 2.2 import, legacy VTK export, triangle quality metrics and
a sampled symmetric-difference distance between obstacle polygons.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

log = logging.getLogger(__name__)


class MeshError(Exception):
    """Base class for mesh-related failures."""


class ParseError(MeshError):
    """Malformed mesh file."""


class TanglingError(MeshError):
    """A deformation inverted at least one element."""


class TopologyError(MeshError):
    """Boundary connectivity does not match expectations."""


class Marker(IntEnum):
    INFLOW = 1
    OUTFLOW = 2
    WALL = 3
    OBSTACLE = 4


@dataclass
class Mesh:
    """Conforming triangulation with marked boundary edges.

    nodes : (n, 2) float array of coordinates
    triangles : (m, 3) int array, counterclockwise node triples
    boundary_edges : (k, 2) int array of node pairs on the boundary
    boundary_markers : (k,) int array of :class:`Marker` values
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_markers: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def copy(self) -> "Mesh":
        return Mesh(self.nodes.copy(), self.triangles.copy(),
                    self.boundary_edges.copy(), self.boundary_markers.copy())

    def triangle_areas(self) -> np.ndarray:
        """Signed areas, positive for counterclockwise triangles."""
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def marked_nodes(self, *markers: Marker) -> np.ndarray:
        """Sorted unique node ids lying on edges with any of the markers."""
        sel = np.isin(self.boundary_markers, markers)
        return np.unique(self.boundary_edges[sel])

    def validate(self) -> None:
        """Check orientation and boundary consistency; raise MeshError."""
        areas = self.triangle_areas()
        if areas.size and areas.min() <= 0.0:
            bad = int(np.argmin(areas))
            raise MeshError(f"triangle {bad} has non-positive area {areas.min():.3e}")
        counts = _edge_use_counts(self.triangles)
        bkeys = set(map(tuple, np.sort(self.boundary_edges, axis=1)))
        for key, c in counts.items():
            if c == 1 and key not in bkeys:
                raise MeshError(f"unmarked boundary edge {key}")
            if c > 2:
                raise MeshError(f"edge {key} shared by {c} triangles")
        for key in bkeys:
            if counts.get(key, 0) != 1:
                raise MeshError(f"marked edge {key} is not a boundary edge")


def _edge_use_counts(triangles: np.ndarray) -> dict:
    counts: dict = {}
    for a, b, c in triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            counts[key] = counts.get(key, 0) + 1
    return counts


@dataclass
class GridHierarchy:
    """Stack of uniformly refined meshes, coarsest first.

    Refinement appends the edge midpoints after the parent nodes, so the
    nodes of level k are exactly the first ``levels[k].n_nodes`` nodes of
    every finer level.  ``parents`` stores, per level > 0, the coarse edge
    (node pair) each midpoint bisects.
    """

    levels: list = field(default_factory=list)
    parents: list = field(default_factory=list)

    @property
    def finest(self) -> Mesh:
        return self.levels[-1]

    @property
    def coarsest(self) -> Mesh:
        return self.levels[0]


@dataclass
class QualityReport:
    min_angle: float
    max_angle: float
    max_radius_ratio: float
    n_elements: int


@dataclass
class Polygon:
    """Simple closed loop of 2D points, counterclockwise."""

    points: np.ndarray

    def area(self) -> float:
        x, y = self.points[:, 0], self.points[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _graded_steps(h0: float, span: float, growth: float, hmax: float) -> np.ndarray:
    """Step sizes covering ``span``, starting at h0 and growing geometrically.

    The raw geometric sequence is rescaled so the steps sum to ``span``
    exactly.
    """
    steps = []
    h, total = h0, 0.0
    while total < span:
        steps.append(h)
        total += h
        h = min(h * growth, hmax)
    s = np.array(steps)
    return s * (span / s.sum())


def _graded_axis(half_inner: float, half_outer: float, n_inner: int,
                 growth: float, hmax: float) -> np.ndarray:
    """Symmetric 1D grid on [-half_outer, half_outer] whose lines include
    +-half_inner, graded outward from the inner block."""
    h0 = 2.0 * half_inner / n_inner
    inner = np.linspace(-half_inner, half_inner, n_inner + 1)
    steps = _graded_steps(h0, half_outer - half_inner, growth, hmax)
    right = half_inner + np.cumsum(steps)
    right[-1] = half_outer
    return np.concatenate([-right[::-1], inner, right])


def generate_benchmark_mesh(length: float, height: float, obstacle_edge: float,
                            n0: int = 3, growth: float = 1.2,
                            hmax: float = 0.8) -> GridHierarchy:
    """Mesh the channel ``[-L/2, L/2] x [-h/2, h/2]`` minus a centered
    axis-aligned square obstacle of the given edge length.

    The mesh is a graded tensor grid split into triangles, so the quality
    is known a priori and no external mesh generator is needed.  ``n0`` is
    the number of cells along one obstacle edge.

    Returns a one-level :class:`GridHierarchy`.
    """
    if not (0.0 < obstacle_edge < height <= length):
        raise MeshError("need 0 < obstacle_edge < height <= length")
    if n0 < 2:
        raise MeshError("n0 must be at least 2")
    xs = _graded_axis(obstacle_edge / 2.0, length / 2.0, n0, growth, hmax)
    ys = _graded_axis(obstacle_edge / 2.0, height / 2.0, n0, growth, hmax)
    nx, ny = len(xs), len(ys)

    xg, yg = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([xg.ravel(), yg.ravel()])
    nid = np.arange(nx * ny).reshape(nx, ny)

    half = obstacle_edge / 2.0
    tol = 1e-12 * max(length, height)
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    inside = (np.abs(cx)[:, None] < half - tol) & (np.abs(cy)[None, :] < half - tol)

    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            if inside[i, j]:
                continue
            a, b = nid[i, j], nid[i + 1, j]
            c, d = nid[i + 1, j + 1], nid[i, j + 1]
            tris.append((a, b, c))
            tris.append((a, c, d))
    triangles = np.array(tris, dtype=np.int64)

    used = np.unique(triangles)
    remap = np.full(nx * ny, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    triangles = remap[triangles]
    nodes = nodes[used]

    counts = _edge_use_counts(triangles)
    bedges, bmarks = [], []
    for (u, v), c in counts.items():
        if c != 1:
            continue
        mx, my = 0.5 * (nodes[u] + nodes[v])
        if abs(mx + length / 2.0) < tol:
            m = Marker.INFLOW
        elif abs(mx - length / 2.0) < tol:
            m = Marker.OUTFLOW
        elif abs(abs(my) - height / 2.0) < tol:
            m = Marker.WALL
        else:
            m = Marker.OBSTACLE
        bedges.append((u, v))
        bmarks.append(m)
    mesh = Mesh(nodes, triangles,
                np.array(bedges, dtype=np.int64),
                np.array(bmarks, dtype=np.int64))
    mesh.validate()
    return GridHierarchy(levels=[mesh], parents=[None])


def structured_rectangle(x0: float, x1: float, y0: float, y1: float,
                         nx: int, ny: int) -> Mesh:
    """Uniform triangulation of a rectangle; left edge inflow, right edge
    outflow, top/bottom wall.  Mainly a test fixture."""
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xg, yg = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([xg.ravel(), yg.ravel()])
    nid = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b = nid[i, j], nid[i + 1, j]
            c, d = nid[i + 1, j + 1], nid[i, j + 1]
            tris.append((a, b, c))
            tris.append((a, c, d))
    bedges, bmarks = [], []
    for j in range(ny):
        bedges.append((nid[0, j], nid[0, j + 1]))
        bmarks.append(Marker.INFLOW)
        bedges.append((nid[nx, j], nid[nx, j + 1]))
        bmarks.append(Marker.OUTFLOW)
    for i in range(nx):
        bedges.append((nid[i, 0], nid[i + 1, 0]))
        bmarks.append(Marker.WALL)
        bedges.append((nid[i, ny], nid[i + 1, ny]))
        bmarks.append(Marker.WALL)
    mesh = Mesh(nodes, np.array(tris, dtype=np.int64),
                np.array(bedges, dtype=np.int64),
                np.array(bmarks, dtype=np.int64))
    mesh.validate()
    return mesh


def refine_uniform(hierarchy: GridHierarchy) -> None:
    """Append one red-refined level: each triangle splits into four via the
    edge midpoints, boundary markers are inherited."""
    mesh = hierarchy.finest
    tris = mesh.triangles
    # unique edges, each as a sorted pair
    raw = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    raw.sort(axis=1)
    edges, inv = np.unique(raw, axis=0, return_inverse=True)
    n0 = mesh.n_nodes
    mid_id = n0 + inv.reshape(3, -1).T  # per triangle: mids of (01),(12),(20)

    mid_coords = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    nodes = np.vstack([mesh.nodes, mid_coords])

    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    m01, m12, m20 = mid_id[:, 0], mid_id[:, 1], mid_id[:, 2]
    new_tris = np.concatenate([
        np.column_stack([a, m01, m20]),
        np.column_stack([m01, b, m12]),
        np.column_stack([m20, m12, c]),
        np.column_stack([m01, m12, m20]),
    ])

    # boundary edges split at their midpoints
    edge_lookup = {tuple(e): n0 + i for i, e in enumerate(map(tuple, edges))}
    bedges, bmarks = [], []
    for (u, v), m in zip(mesh.boundary_edges, mesh.boundary_markers):
        mid = edge_lookup[(min(u, v), max(u, v))]
        bedges.append((u, mid))
        bedges.append((mid, v))
        bmarks.extend((m, m))
    fine = Mesh(nodes, new_tris, np.array(bedges, dtype=np.int64),
                np.array(bmarks, dtype=np.int64))
    fine.validate()
    hierarchy.levels.append(fine)
    hierarchy.parents.append(edges)


def apply_deformation(hierarchy: GridHierarchy, u: np.ndarray) -> None:
    """Move every finest-level node x to x + u(x) and update the coarser
    levels by injection at their coincident fine nodes.

    ``u`` must vanish on inflow/outflow/wall nodes.  If any level would
    contain an inverted element, a :class:`TanglingError` is raised and the
    hierarchy is left untouched.
    """
    finest = hierarchy.finest
    if u.shape != finest.nodes.shape:
        raise ValueError("displacement shape mismatch")
    fixed = finest.marked_nodes(Marker.INFLOW, Marker.OUTFLOW, Marker.WALL)
    if fixed.size and np.abs(u[fixed]).max() > 1e-14:
        raise ValueError("displacement must vanish on inflow/outflow/wall")

    new_fine = finest.nodes + u
    new_coords = []
    for mesh in hierarchy.levels:
        coords = new_fine[:mesh.n_nodes]
        p = coords[mesh.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if areas.min() <= 0.0:
            raise TanglingError(
                f"deformation inverts element {int(np.argmin(areas))} "
                f"on level {hierarchy.levels.index(mesh)}")
        new_coords.append(coords)
    for mesh, coords in zip(hierarchy.levels, new_coords):
        mesh.nodes = coords.copy()


def quality_report(mesh: Mesh) -> QualityReport:
    """Extreme interior angles (degrees) and the largest circumradius to
    inradius ratio over all triangles."""
    p = mesh.nodes[mesh.triangles]
    la = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    lb = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    lc = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    areas = mesh.triangle_areas()

    def angle(opp, s1, s2):
        cosv = (s1 ** 2 + s2 ** 2 - opp ** 2) / (2.0 * s1 * s2)
        return np.degrees(np.arccos(np.clip(cosv, -1.0, 1.0)))

    ang = np.column_stack([angle(la, lb, lc), angle(lb, lc, la),
                           angle(lc, la, lb)])
    s = 0.5 * (la + lb + lc)
    circum = la * lb * lc / (4.0 * areas)
    inr = areas / s
    return QualityReport(min_angle=float(ang.min()),
                         max_angle=float(ang.max()),
                         max_radius_ratio=float((circum / inr).max()),
                         n_elements=mesh.n_triangles)


def obstacle_polygon(mesh: Mesh) -> Polygon:
    """Ordered counterclockwise loop of the obstacle boundary nodes."""
    sel = mesh.boundary_markers == Marker.OBSTACLE
    edges = mesh.boundary_edges[sel]
    if edges.size == 0:
        raise TopologyError("mesh has no obstacle boundary")
    adj: dict = {}
    for u, v in edges:
        adj.setdefault(int(u), []).append(int(v))
        adj.setdefault(int(v), []).append(int(u))
    for node, nb in adj.items():
        if len(nb) != 2:
            raise TopologyError(f"obstacle boundary node {node} has degree {len(nb)}")
    start = int(edges[0, 0])
    loop = [start]
    prev, cur = None, start
    while True:
        a, b = adj[cur]
        nxt = b if a == prev else a
        if nxt == start:
            break
        loop.append(nxt)
        prev, cur = cur, nxt
        if len(loop) > len(adj):
            raise TopologyError("obstacle boundary is not a single loop")
    if len(loop) != len(adj):
        raise TopologyError("obstacle boundary has multiple loops")
    poly = Polygon(mesh.nodes[loop].copy())
    if poly.area() < 0.0:
        poly = Polygon(poly.points[::-1].copy())
    return poly


def _even_odd_inside(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Vectorized even-odd (ray crossing) point-in-polygon test."""
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    px, py = polygon[:, 0], polygon[:, 1]
    qx, qy = np.roll(px, -1), np.roll(py, -1)
    for x1, y1, x2, y2 in zip(px, py, qx, qy):
        if y1 == y2:
            continue
        crosses = (y1 > y) != (y2 > y)
        xcross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xcross)
    return inside


def symmetric_difference_area(a: Polygon, b: Polygon,
                              samples_per_axis: int = 1000) -> float:
    """Area of (a \\ b) union (b \\ a), sampled on a regular grid over the
    joint bounding box.

    The estimate's error is O(cell area x total perimeter): only cells cut
    by a polygon boundary can be misclassified.
    """
    if samples_per_axis < 100:
        raise ValueError("samples_per_axis must be at least 100")
    for poly in (a, b):
        if len(poly.points) < 3 or poly.area() <= 0.0:
            raise ValueError("degenerate polygon")
    pts = np.vstack([a.points, b.points])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = hi - lo
    n = samples_per_axis
    cx = lo[0] + (np.arange(n) + 0.5) * span[0] / n
    cy = lo[1] + (np.arange(n) + 0.5) * span[1] / n
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    cell = (span[0] / n) * (span[1] / n)
    total = 0
    for chunk in np.array_split(centers, max(1, len(centers) // 262144)):
        ina = _even_odd_inside(chunk, a.points)
        inb = _even_odd_inside(chunk, b.points)
        total += int(np.count_nonzero(ina ^ inb))
    return total * cell


def read_msh(path: str, marker_map: dict) -> Mesh:
    """Read a Gmsh MSH ASCII v2.2 file (triangles and marked lines only).

    ``marker_map`` maps physical tags of line elements to :class:`Marker`
    values.  Triangles with negative orientation are reordered with a
    logged warning.
    """
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()

    def find_section(name):
        try:
            start = lines.index(f"${name}")
        except ValueError:
            raise ParseError(f"missing ${name} section in {path}") from None
        try:
            end = lines.index(f"$End{name}", start)
        except ValueError:
            raise ParseError(f"unterminated ${name} section "
                             f"(line {start + 1})") from None
        return start, end

    ns, ne = find_section("Nodes")
    try:
        count = int(lines[ns + 1])
    except (ValueError, IndexError):
        raise ParseError(f"bad node count at line {ns + 2}") from None
    ids, coords = [], []
    for ln in range(ns + 2, ne):
        parts = lines[ln].split()
        if len(parts) < 3:
            raise ParseError(f"malformed node at line {ln + 1}")
        ids.append(int(parts[0]))
        coords.append((float(parts[1]), float(parts[2])))
    if len(ids) != count:
        raise ParseError(f"$Nodes declares {count} nodes, found {len(ids)}")
    id_map = {i: k for k, i in enumerate(ids)}
    nodes = np.array(coords)

    es, ee = find_section("Elements")
    tris, bedges, bmarks = [], [], []
    for ln in range(es + 2, ee):
        parts = [int(x) for x in lines[ln].split()]
        etype, ntags = parts[1], parts[2]
        tags = parts[3:3 + ntags]
        conn = parts[3 + ntags:]
        try:
            conn = [id_map[c] for c in conn]
        except KeyError as exc:
            raise ParseError(f"dangling node reference {exc} at line {ln + 1}") from None
        if etype == 2:
            tris.append(conn)
        elif etype == 1:
            phys = tags[0] if tags else 0
            if phys not in marker_map:
                raise ParseError(f"unmapped physical tag {phys} at line {ln + 1}")
            bedges.append(conn)
            bmarks.append(int(marker_map[phys]))
        else:
            raise ParseError(f"unsupported element type {etype} at line {ln + 1}")

    triangles = np.array(tris, dtype=np.int64)
    p = nodes[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    flipped = areas < 0.0
    if flipped.any():
        log.warning("reordered %d negatively oriented triangles in %s",
                    int(flipped.sum()), path)
        triangles[flipped] = triangles[flipped][:, ::-1]
    mesh = Mesh(nodes, triangles, np.array(bedges, dtype=np.int64),
                np.array(bmarks, dtype=np.int64))
    mesh.validate()
    return mesh


def write_vtk(mesh: Mesh, fields: dict, path: str) -> None:
    """Write a legacy ASCII VTK unstructured grid with nodal point data.

    Each field value must be a scalar or 2-vector per node; coordinates and
    values are printed with 17 significant digits.
    """
    n = mesh.n_nodes
    for name, data in fields.items():
        arr = np.asarray(data)
        if arr.shape not in ((n,), (n, 2)):
            raise ValueError(f"field {name!r} has shape {arr.shape}, "
                             f"expected ({n},) or ({n}, 2)")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("# vtk DataFile Version 3.0\nshapeflow output\nASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {n} double\n")
        for x, y in mesh.nodes:
            f.write(f"{x:.17g} {y:.17g} 0\n")
        m = mesh.n_triangles
        f.write(f"CELLS {m} {4 * m}\n")
        for a, b, c in mesh.triangles:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {m}\n")
        f.write("5\n" * m)
        if fields:
            f.write(f"POINT_DATA {n}\n")
            for name, data in fields.items():
                arr = np.asarray(data)
                if arr.ndim == 1:
                    f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in arr:
                        f.write(f"{v:.17g}\n")
                else:
                    f.write(f"VECTORS {name} double\n")
                    for vx, vy in arr:
                        f.write(f"{vx:.17g} {vy:.17g} 0\n")
    os.replace(tmp, path)
