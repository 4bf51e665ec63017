"""Edge-mean nonconforming P1 space on triangulations.

A scalar field carries one value per edge: the mean of the function over
that edge.  On every cell the field is the affine function matching the
three edge means, so fields are continuous only at edge midpoints in the
mean sense; all broken operators act cellwise on those affine pieces.
The shape function of edge ``sigma`` is 1 - 2*lambda_opp with lambda_opp
the barycentric coordinate of the opposite vertex.
"""

from __future__ import annotations

import warnings
import weakref
from dataclasses import dataclass

import numpy as np

from .quadrature import cell_quadrature, edge_quadrature, gauss_segment


@dataclass
class DofMap:
    """Free velocity unknowns: one per interior edge and component.

    Exterior edges are constrained to zero and never enter a solve.  The
    free index of component ``c`` on interior edge rank ``r`` is
    ``c * n_free_scalar + r`` (component-major blocks keep the diffusion
    matrix block diagonal).
    """

    mesh: object
    edge_to_free: np.ndarray  # (n_edges,) rank among interior edges, -1 if constrained
    n_free_scalar: int

    @property
    def n_free(self):
        return 2 * self.n_free_scalar

    def component_dofs(self, component):
        base = component * self.n_free_scalar
        return base + np.arange(self.n_free_scalar)


def build_dofmap(mesh):
    edge_to_free = np.full(mesh.n_edges, -1, dtype=np.int64)
    edge_to_free[mesh.interior_edges] = np.arange(mesh.n_interior_edges)
    return DofMap(mesh=mesh, edge_to_free=edge_to_free,
                  n_free_scalar=mesh.n_interior_edges)


@dataclass
class CRFunction:
    """Scalar edge-mean field; ``values[e]`` is the mean over edge e."""

    mesh: object
    values: np.ndarray

    def copy(self):
        return CRFunction(self.mesh, self.values.copy())


@dataclass
class VelocityField:
    """Vector edge-mean field, ``values`` of shape (n_edges, 2)."""

    mesh: object
    values: np.ndarray

    def copy(self):
        return VelocityField(self.mesh, self.values.copy())

    def component(self, c):
        return CRFunction(self.mesh, self.values[:, c].copy())


@dataclass
class CellField:
    """Piecewise-constant field, one value per cell."""

    mesh: object
    values: np.ndarray

    def copy(self):
        return CellField(self.mesh, self.values.copy())


# -- cellwise affine structure ---------------------------------------

@dataclass
class _BasisTables:
    grad_phi: np.ndarray      # (n_cells, 3, 2) gradient of each edge shape function
    cell_centroid: np.ndarray

_TABLES = weakref.WeakKeyDictionary()


def basis_tables(mesh):
    """Per-cell shape-function gradients, cached per mesh."""
    tab = _TABLES.get(mesh)
    if tab is None:
        p = mesh.vertices[mesh.cells]
        u = p[:, 1] - p[:, 0]
        v = p[:, 2] - p[:, 0]
        area2 = (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])[:, None]
        grad_phi = np.empty((mesh.n_cells, 3, 2))
        for j in range(3):
            opp = p[:, (j + 2) % 3] - p[:, (j + 1) % 3]
            # grad lambda_j = perp(opp) / (2|K|); shape function is 1 - 2 lambda_j
            grad_phi[:, j, 0] = 2.0 * opp[:, 1] / area2[:, 0]
            grad_phi[:, j, 1] = -2.0 * opp[:, 0] / area2[:, 0]
        tab = _BasisTables(grad_phi=grad_phi, cell_centroid=p.mean(axis=1))
        _TABLES[mesh] = tab
    return tab


def eval_basis(mesh, edge, cell, points):
    """Shape function of ``edge`` on ``cell`` at physical points."""
    local = np.flatnonzero(mesh.cell_edges[cell] == edge)
    if local.size == 0:
        raise ValueError(f"edge {edge} is not an edge of cell {cell}")
    tab = basis_tables(mesh)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rel = points - tab.cell_centroid[cell]
    out = 1.0 / 3.0 + rel @ tab.grad_phi[cell, local[0]]
    return out if out.shape[0] > 1 else float(out[0])


def broken_gradient(v):
    """Cellwise gradient; (n_cells, 2) for scalars, (n_cells, 2, 2) with
    entry [c, i, j] = d u_i / d x_j for velocities."""
    tab = basis_tables(v.mesh)
    dof = v.values[v.mesh.cell_edges]  # scalar (nc,3) or vector (nc,3,2)
    if dof.ndim == 2:
        return np.einsum("cjd,cj->cd", tab.grad_phi, dof)
    return np.einsum("cjd,cji->cid", tab.grad_phi, dof)


def broken_divergence(u):
    """Cellwise divergence of a velocity field as a CellField."""
    g = broken_gradient(u)
    return CellField(u.mesh, g[:, 0, 0] + g[:, 1, 1])


def evaluate_cellwise(v, points):
    """Evaluate the affine pieces at per-cell point sets (n_cells, nq, 2)."""
    tab = basis_tables(v.mesh)
    g = broken_gradient(v)
    rel = points - tab.cell_centroid[:, None, :]
    mean = v.values[v.mesh.cell_edges].mean(axis=1)
    if v.values.ndim == 1:
        return mean[:, None] + np.einsum("cqd,cd->cq", rel, g)
    return mean[:, None, :] + np.einsum("cqd,cid->cqi", rel, g)


def evaluate_at_points(v, points, cell_of_point):
    """Evaluate at scattered points given their containing cell (-1 gives 0)."""
    points = np.asarray(points, dtype=float)
    cells = np.asarray(cell_of_point)
    inside = cells >= 0
    c = cells[inside]
    tab = basis_tables(v.mesh)
    g = broken_gradient(v)
    mean_all = v.values[v.mesh.cell_edges].mean(axis=1)
    rel = points[inside] - tab.cell_centroid[c]
    if v.values.ndim == 1:
        out = np.zeros(len(points))
        out[inside] = mean_all[c] + np.einsum("nd,nd->n", rel, g[c])
    else:
        out = np.zeros((len(points), 2))
        out[inside] = mean_all[c] + np.einsum("nd,nid->ni", rel, g[c])
    return out


# -- interpolation ---------------------------------------------------

def interpolate_cr(mesh, f, order=3, expect_zero_trace=False):
    """Edge-mean interpolant of a pointwise-defined function.

    ``f`` maps an (n, 2) array of points to (n,) or (n, 2) values; the
    result is a CRFunction or VelocityField accordingly.  Edge means use
    ``order``-point Gauss quadrature, so they are exact for polynomial
    traces of degree <= 2*order - 1.  Boundary edges receive the computed
    mean as well; with ``expect_zero_trace`` a warning flags fields that
    do not vanish there.
    """
    if order < 2:
        raise ValueError(f"edge quadrature order must be >= 2, got {order}")
    pts, w = edge_quadrature(mesh, order)
    fv = np.asarray(f(pts.reshape(-1, 2)), dtype=float)
    if fv.ndim == 1:
        vals = (fv.reshape(mesh.n_edges, order) * w).sum(axis=1)
        out = CRFunction(mesh, vals)
    else:
        vals = (fv.reshape(mesh.n_edges, order, 2) * w[:, None]).sum(axis=1)
        out = VelocityField(mesh, vals)
    if expect_zero_trace:
        bmax = float(np.abs(vals[mesh.boundary_edges]).max()) if len(mesh.boundary_edges) else 0.0
        scale = float(np.abs(vals).max()) or 1.0
        if bmax > 1e-10 * scale:
            warnings.warn(
                f"interpolated field has boundary edge means up to {bmax:g}; "
                "it is not a member of the zero-trace space", stacklevel=2)
    return out


# -- norms and jumps -------------------------------------------------

def broken_h1_seminorm(v, geo):
    """Square root of the cellwise Dirichlet energy."""
    g = broken_gradient(v)
    per_cell = (g ** 2).reshape(g.shape[0], -1).sum(axis=1)
    return float(np.sqrt(per_cell @ geo.cell_measure))


def discrete_rho_seminorm(q, beta, geo=None, mesh=None):
    """Weighted jump seminorm for cellwise-constant density fields.

    Sums ``(h_K + h_L)**beta * (|sigma| / h_sigma) * (q_K - q_L)**2`` over
    interior edges and returns the square root.
    """
    if mesh is None:
        mesh = q.mesh
    if geo is None:
        from .mesh import compute_geometry
        geo = compute_geometry(mesh)
    vals = q.values if hasattr(q, "values") else np.asarray(q, dtype=float)
    ie = mesh.interior_edges
    K = mesh.edge_cells[ie, 0]
    L = mesh.edge_cells[ie, 1]
    weight = ((geo.cell_diameter[K] + geo.cell_diameter[L]) ** beta
              * geo.edge_measure[ie] / geo.edge_diameter[ie])
    return float(np.sqrt(np.sum(weight * (vals[K] - vals[L]) ** 2)))


def edge_jump_integrals(v, geo, order=3):
    """Integrals of the inter-cell jump and its square over every edge.

    The jump is trace-from-first-cell minus trace-from-second-cell; on
    boundary edges it is the trace itself.  Returns (jump_integral,
    jump_square_integral); for velocities the square sums components and
    the plain integral keeps one column per component.
    """
    mesh = v.mesh
    pts, w = edge_quadrature(mesh, order)
    tab = basis_tables(mesh)
    g = broken_gradient(v)
    mean = v.values[mesh.cell_edges].mean(axis=1)

    def side(cells):
        rel = pts - tab.cell_centroid[cells][:, None, :]
        if v.values.ndim == 1:
            return mean[cells][:, None] + np.einsum("eqd,ed->eq", rel, g[cells])
        return mean[cells][:, None, :] + np.einsum("eqd,eid->eqi", rel, g[cells])

    jump = side(mesh.edge_cells[:, 0])
    L = mesh.edge_cells[:, 1]
    interior = L >= 0
    jump_L = side(np.where(interior, L, 0))
    jump = np.where(interior[:, None, None] if jump.ndim == 3 else interior[:, None],
                    jump - jump_L, jump)

    if v.values.ndim == 1:
        integral = geo.edge_measure * (jump * w).sum(axis=1)
        square = geo.edge_measure * (jump ** 2 * w).sum(axis=1)
    else:
        integral = geo.edge_measure[:, None] * (jump * w[:, None]).sum(axis=1)
        square = geo.edge_measure * (jump ** 2 * w[:, None]).sum(axis=(1, 2))
    return integral, square


# -- L2 machinery against smooth fields ------------------------------

def l2_error(v, exact, geo, degree=8):
    """L2 distance between an edge-mean field and a smooth function."""
    mesh = v.mesh
    pts, w = cell_quadrature(mesh, geo, degree)
    vh = evaluate_cellwise(v, pts)
    ve = np.asarray(exact(pts.reshape(-1, 2)), dtype=float).reshape(vh.shape)
    diff = (vh - ve) ** 2
    if diff.ndim == 3:
        diff = diff.sum(axis=2)
    return float(np.sqrt((diff * w).sum()))


def broken_h1_error(v, exact_grad, geo, degree=8):
    """Broken H1 distance to a smooth function with known gradient."""
    mesh = v.mesh
    pts, w = cell_quadrature(mesh, geo, degree)
    g = broken_gradient(v)
    ge = np.asarray(exact_grad(pts.reshape(-1, 2)), dtype=float)
    if v.values.ndim == 1:
        ge = ge.reshape(pts.shape[0], pts.shape[1], 2)
        diff = ((g[:, None, :] - ge) ** 2).sum(axis=2)
    else:
        ge = ge.reshape(pts.shape[0], pts.shape[1], 2, 2)
        diff = ((g[:, None, :, :] - ge) ** 2).sum(axis=(2, 3))
    return float(np.sqrt((diff * w).sum()))


# -- dumps -----------------------------------------------------------

def write_edge_csv(field, path, config_hash=None):
    """Dump an edge field as ``edge_id,component,value`` rows."""
    vals = field.values if field.values.ndim == 2 else field.values[:, None]
    with open(path, "w") as fh:
        fh.write("edge_id,component,value\n")
        for e in range(vals.shape[0]):
            for c in range(vals.shape[1]):
                fh.write(f"{e},{c},{vals[e, c]:.17g}\n")
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")


def write_cell_csv(field, path, config_hash=None):
    """Dump a cell field as ``cell_id,value`` rows."""
    with open(path, "w") as fh:
        fh.write("cell_id,value\n")
        for c, v in enumerate(field.values):
            fh.write(f"{c},{v:.17g}\n")
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
