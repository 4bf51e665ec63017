"""Conforming simplicial meshes with a global edge numbering.

Velocity unknowns live on edges, so the mesh keeps the full edge incidence
picture: every cell knows its edges (local edge ``j`` is opposite local
vertex ``j``) and every edge knows the one or two cells it bounds.  The
first incident cell of an edge fixes the orientation of the stored unit
normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised for malformed mesh files or invalid connectivity."""


class Mesh:
    """Triangulation of a polygonal domain.

    Parameters
    ----------
    vertices : array_like, shape (n_vertices, 2)
        Vertex coordinates.
    cells : array_like, shape (n_cells, 3)
        Vertex indices per cell, counter-clockwise.

    Attributes
    ----------
    edges : ndarray, shape (n_edges, 2)
        Sorted vertex pairs, lexicographic order.
    cell_edges : ndarray, shape (n_cells, 3)
        Global edge index of the local edge opposite each local vertex.
    edge_cells : ndarray, shape (n_edges, 2)
        Incident cells; column 1 is -1 on boundary edges.  Column 0 is
        the orientation reference for normals.
    is_boundary_edge : ndarray of bool, shape (n_edges,)
    """

    dim = 2

    def __init__(self, vertices, cells):
        vertices = np.asarray(vertices, dtype=float)
        cells = np.asarray(cells, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError(f"vertices must have shape (n, 2), got {vertices.shape}")
        if cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshError(f"cells must have shape (n, 3), got {cells.shape}")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell vertex index out of range")

        self.vertices = vertices
        self.cells = cells
        self._validate_cells()
        self._build_edges()

    # -- construction ------------------------------------------------

    def _validate_cells(self):
        p = self.vertices[self.cells]
        u = p[:, 1] - p[:, 0]
        v = p[:, 2] - p[:, 0]
        signed = 0.5 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        bad = np.flatnonzero(signed <= 0.0)
        if bad.size:
            raise MeshError(
                f"cell {bad[0]} has non-positive signed measure {signed[bad[0]]:g}; "
                "vertices must be counter-clockwise and non-degenerate"
            )
        key = np.sort(self.cells, axis=1)
        _, first = np.unique(key, axis=0, return_index=True)
        if len(first) != len(self.cells):
            dup = np.setdiff1d(np.arange(len(self.cells)), first)[0]
            raise MeshError(f"cell {dup} duplicates another cell")

    def _build_edges(self):
        nc = len(self.cells)
        # local edge j is opposite local vertex j
        locals_ = self.cells[:, [[1, 2], [2, 0], [0, 1]]].reshape(-1, 2)
        locals_sorted = np.sort(locals_, axis=1)
        edges, inverse = np.unique(locals_sorted, axis=0, return_inverse=True)
        self.edges = edges
        self.cell_edges = inverse.reshape(nc, 3)

        edge_cells = np.full((len(edges), 2), -1, dtype=np.int64)
        counts = np.zeros(len(edges), dtype=np.int64)
        flat_cells = np.repeat(np.arange(nc), 3)
        for e, c in zip(self.cell_edges.ravel(), flat_cells):
            if counts[e] == 2:
                raise MeshError(f"edge {tuple(edges[e])} is shared by more than two cells")
            edge_cells[e, counts[e]] = c
            counts[e] += 1
        self.edge_cells = edge_cells
        self.is_boundary_edge = edge_cells[:, 1] < 0
        self.interior_edges = np.flatnonzero(~self.is_boundary_edge)
        self.boundary_edges = np.flatnonzero(self.is_boundary_edge)

    # -- views -------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def n_interior_edges(self):
        return len(self.interior_edges)

    def translated(self, shift):
        """Rigidly shifted copy, identical connectivity."""
        return Mesh(self.vertices + np.asarray(shift, dtype=float), self.cells.copy())

    def __repr__(self):
        return (f"Mesh(n_vertices={self.n_vertices}, n_cells={self.n_cells}, "
                f"n_edges={self.n_edges})")


@dataclass
class GeometryTables:
    """Per-entity measures and derived size data for one mesh.

    ``unit_normal[e]`` points from the first incident cell into the second
    one on interior edges and out of the domain on boundary edges.
    """

    cell_measure: np.ndarray
    edge_measure: np.ndarray
    cell_diameter: np.ndarray
    edge_diameter: np.ndarray
    inball_diameter: np.ndarray
    unit_normal: np.ndarray
    edge_centroid: np.ndarray
    cell_centroid: np.ndarray
    h: float
    domain_measure: float


@dataclass
class MeshQuality:
    """Regularity summary produced by :func:`regularity_theta`."""

    theta: float
    per_cell_ratio: np.ndarray
    per_edge_ratio: np.ndarray
    pair_bound_max: float
    pair_bound_violations: list = field(default_factory=list)


def build_structured(nx, ny, rect=(0.0, 0.0, 1.0, 1.0)):
    """Structured triangulation of a rectangle, two cells per subrectangle.

    Every subrectangle is split along the same diagonal, so all cells are
    congruent right triangles and the mesh family is uniformly regular.

    Parameters
    ----------
    nx, ny : int
        Subdivisions per axis, at least 1.
    rect : tuple (x0, y0, x1, y1)
        Domain corners, x1 > x0 and y1 > y0.
    """
    if nx < 1 or ny < 1:
        raise ValueError(f"nx and ny must be >= 1, got ({nx}, {ny})")
    x0, y0, x1, y1 = map(float, rect)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rectangle {rect}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(ix, iy):
        return iy * (nx + 1) + ix

    cells = []
    for iy in range(ny):
        for ix in range(nx):
            v00 = vid(ix, iy)
            v10 = vid(ix + 1, iy)
            v01 = vid(ix, iy + 1)
            v11 = vid(ix + 1, iy + 1)
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
    return Mesh(vertices, np.asarray(cells, dtype=np.int64))


def read_mesh(path):
    """Read a mesh from the plain-text format.

    Layout: a ``crmesh 2`` header line, a ``<n_vertices> <n_cells>`` count
    line, one ``x y`` line per vertex, then one ``i j k`` line per cell
    with 0-based indices.  ``#`` starts a comment.
    """
    raw = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if body:
                raw.append((lineno, body))

    def fail(lineno, msg):
        raise MeshError(f"{path}:{lineno}: {msg}")

    if not raw:
        raise MeshError(f"{path}: empty mesh file")
    lineno, header = raw[0]
    parts = header.split()
    if len(parts) != 2 or parts[0] != "crmesh":
        fail(lineno, f"expected 'crmesh <dim>' header, got {header!r}")
    if parts[1] != "2":
        fail(lineno, f"unsupported dimension {parts[1]!r}")
    if len(raw) < 2:
        raise MeshError(f"{path}: missing count line")
    lineno, counts = raw[1]
    try:
        nv, nc = (int(t) for t in counts.split())
    except ValueError:
        fail(lineno, f"expected '<n_vertices> <n_cells>', got {counts!r}")
    if nv < 3 or nc < 1:
        fail(lineno, f"implausible counts n_vertices={nv}, n_cells={nc}")
    if len(raw) != 2 + nv + nc:
        raise MeshError(
            f"{path}: expected {2 + nv + nc} content lines for "
            f"{nv} vertices and {nc} cells, found {len(raw)}"
        )

    vertices = np.empty((nv, 2))
    for i in range(nv):
        lineno, body = raw[2 + i]
        toks = body.split()
        if len(toks) != 2:
            fail(lineno, f"vertex line needs 2 coordinates, got {body!r}")
        try:
            vertices[i] = [float(toks[0]), float(toks[1])]
        except ValueError:
            fail(lineno, f"bad vertex coordinates {body!r}")

    cells = np.empty((nc, 3), dtype=np.int64)
    for i in range(nc):
        lineno, body = raw[2 + nv + i]
        toks = body.split()
        if len(toks) != 3:
            fail(lineno, f"cell line needs 3 vertex indices, got {body!r}")
        try:
            cells[i] = [int(t) for t in toks]
        except ValueError:
            fail(lineno, f"bad cell indices {body!r}")
        if cells[i].min() < 0 or cells[i].max() >= nv:
            fail(lineno, f"cell vertex index out of range in {body!r}")

    try:
        return Mesh(vertices, cells)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def refine_uniform(mesh):
    """Split every cell into four congruent children via edge midpoints.

    Children inherit the parent orientation; regularity is preserved
    because each child is similar to its parent with ratio 1/2.
    """
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])
    m = mesh.n_vertices + mesh.cell_edges  # midpoint vertex per local edge
    a, b, c = mesh.cells[:, 0], mesh.cells[:, 1], mesh.cells[:, 2]
    m0, m1, m2 = m[:, 0], m[:, 1], m[:, 2]
    children = np.empty((4 * mesh.n_cells, 3), dtype=np.int64)
    children[0::4] = np.column_stack([a, m2, m1])
    children[1::4] = np.column_stack([b, m0, m2])
    children[2::4] = np.column_stack([c, m1, m0])
    children[3::4] = np.column_stack([m0, m1, m2])
    return Mesh(vertices, children)


def compute_geometry(mesh):
    """Measures, diameters, inball diameters, normals and centroids."""
    p = mesh.vertices[mesh.cells]  # (nc, 3, 2)
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    cell_measure = 0.5 * (e2[:, 0] * (-e1[:, 1]) - e2[:, 1] * (-e1[:, 0]))
    lengths = np.stack([np.linalg.norm(e0, axis=1),
                        np.linalg.norm(e1, axis=1),
                        np.linalg.norm(e2, axis=1)], axis=1)
    cell_diameter = lengths.max(axis=1)
    # inball diameter 2r with r = |K| / semiperimeter
    inball_diameter = 4.0 * cell_measure / lengths.sum(axis=1)
    cell_centroid = p.mean(axis=1)

    ev = mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]]
    edge_measure = np.linalg.norm(ev, axis=1)
    edge_diameter = edge_measure.copy()  # segments: diameter equals length
    edge_centroid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])

    normal = np.column_stack([ev[:, 1], -ev[:, 0]]) / edge_measure[:, None]
    # orient away from the first incident cell
    towards = edge_centroid - cell_centroid[mesh.edge_cells[:, 0]]
    flip = np.einsum("ed,ed->e", normal, towards) < 0.0
    normal[flip] *= -1.0

    return GeometryTables(
        cell_measure=cell_measure,
        edge_measure=edge_measure,
        cell_diameter=cell_diameter,
        edge_diameter=edge_diameter,
        inball_diameter=inball_diameter,
        unit_normal=normal,
        edge_centroid=edge_centroid,
        cell_centroid=cell_centroid,
        h=float(cell_diameter.max()),
        domain_measure=float(cell_measure.sum()),
    )


def regularity_theta(mesh, geo=None):
    """Shape-regularity parameter of the mesh.

    Takes the worst of the per-cell inball-to-diameter ratios and, per
    interior edge, the two diameter ratios of the adjacent cells.  Also
    verifies the size bound h_sigma * |sigma| <= 2 * theta**-2 * |K| for
    every cell/edge pair and records any violation.
    """
    if geo is None:
        geo = compute_geometry(mesh)
    per_cell = geo.inball_diameter / geo.cell_diameter

    ie = mesh.interior_edges
    hK = geo.cell_diameter[mesh.edge_cells[ie, 0]]
    hL = geo.cell_diameter[mesh.edge_cells[ie, 1]]
    per_edge = np.minimum(hK / hL, hL / hK)

    theta = float(min(per_cell.min(), per_edge.min() if per_edge.size else np.inf))

    bound = 2.0 * theta ** (-mesh.dim) * geo.cell_measure  # per cell
    pair_ratio = np.empty((mesh.n_cells, 3))
    violations = []
    for j in range(3):
        e = mesh.cell_edges[:, j]
        pair_ratio[:, j] = geo.edge_diameter[e] * geo.edge_measure[e] / bound
    worst = float(pair_ratio.max())
    if worst > 1.0 + 1e-12:
        for c, j in zip(*np.nonzero(pair_ratio > 1.0 + 1e-12)):
            violations.append((int(c), int(mesh.cell_edges[c, j]), float(pair_ratio[c, j])))

    return MeshQuality(
        theta=theta,
        per_cell_ratio=per_cell,
        per_edge_ratio=per_edge,
        pair_bound_max=worst,
        pair_bound_violations=violations,
    )
