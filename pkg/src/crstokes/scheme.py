"""Discrete operators of the coupled creeping-flow scheme.

Momentum is discretized in the edge-mean space (cellwise diffusion plus a
pressure-divergence coupling), mass by a cellwise upwind balance of the
density with two mesh-dependent stabilizers: a diagonal anchor pulling
the density toward its prescribed mean and a jump penalty with weight
``|rho_K + rho_L|``.  The anchor is what pins the total mass, the penalty
is what makes the density jumps controllable.  Linearizing the penalty
weight at the previous density iterate makes the mass system linear with
positive diagonal and nonpositive off-diagonal entries, which is the
structure the positivity argument rests on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cr_space import basis_tables
from .quadrature import cell_quadrature


@dataclass
class SchemeParams:
    """Physical and stabilization parameters.

    ``A`` is the slope of the linear pressure law (density = A * pressure),
    ``M`` the total mass, ``alpha`` the anchor exponent (>= 1) and ``beta``
    the jump-penalty exponent (0 < beta < 2).  Out-of-range exponents
    raise unless ``strict=False``, which downgrades to a warning.
    """

    A: float = 1.0
    M: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    domain_measure: float = 1.0
    strict: bool = True

    def __post_init__(self):
        if self.A <= 0 or self.M <= 0 or self.domain_measure <= 0:
            raise ValueError(
                f"A, M and domain measure must be positive, got "
                f"A={self.A}, M={self.M}, |Omega|={self.domain_measure}")
        problems = []
        if self.alpha < 1.0:
            problems.append(f"alpha={self.alpha} < 1")
        if not (0.0 < self.beta < 2.0):
            problems.append(f"beta={self.beta} outside (0, 2)")
        if problems:
            msg = "; ".join(problems) + " is outside the supported range"
            if self.strict:
                raise ValueError(msg + " (pass strict=False to override)")
            warnings.warn(msg, stacklevel=2)

    @property
    def rho_star(self):
        return self.M / self.domain_measure

    @classmethod
    def from_geometry(cls, geo, **kwargs):
        return cls(domain_measure=geo.domain_measure, **kwargs)

    def as_dict(self):
        return {"A": self.A, "M": self.M, "alpha": self.alpha,
                "beta": self.beta, "domain_measure": self.domain_measure,
                "rho_star": self.rho_star}


@dataclass
class SparseSystem:
    """A sparse linear system together with a short provenance note."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    description: str = ""

    @property
    def n(self):
        return self.matrix.shape[0]


def dump_system(system, path):
    """MatrixMarket dump of the matrix for offline inspection."""
    from scipy.io import mmwrite
    mmwrite(str(path), system.matrix.tocoo())


# -- free-vector packing ---------------------------------------------

def free_vector(u, dofmap):
    """Extract the free (interior-edge) unknowns of a velocity field."""
    ie = dofmap.mesh.interior_edges
    return np.concatenate([u.values[ie, 0], u.values[ie, 1]])


def velocity_from_free(vec, dofmap):
    """Inverse of :func:`free_vector`; constrained edges stay zero."""
    from .cr_space import VelocityField
    mesh = dofmap.mesh
    values = np.zeros((mesh.n_edges, 2))
    n = dofmap.n_free_scalar
    values[mesh.interior_edges, 0] = vec[:n]
    values[mesh.interior_edges, 1] = vec[n:]
    return VelocityField(mesh, values)


# -- momentum side ---------------------------------------------------

def assemble_momentum(mesh, geo, dofmap, f=None, quad_degree=6):
    """Diffusion matrix, divergence coupling and load vector.

    Returns ``(A_mat, B_mat, b)``: the broken Dirichlet form on free
    velocity unknowns (symmetric positive definite, block diagonal over
    components), the coupling whose row K holds ``|K| * d(phi)/d(x_i)``
    so that ``q @ B @ v`` is the broken divergence integral weighted by a
    cellwise-constant q, and the load ``integral(f . basis)``.
    """
    if quad_degree < 1:
        raise ValueError(f"quadrature degree must be >= 1, got {quad_degree}")
    tab = basis_tables(mesh)
    G = tab.grad_phi
    nfs = dofmap.n_free_scalar
    nc = mesh.n_cells

    local = np.einsum("cid,cjd,c->cij", G, G, geo.cell_measure)
    rank = dofmap.edge_to_free[mesh.cell_edges]  # (nc, 3)
    rows = np.repeat(rank[:, :, None], 3, axis=2)
    cols = np.repeat(rank[:, None, :], 3, axis=1)
    keep = (rows >= 0) & (cols >= 0)
    A_scalar = sp.coo_matrix(
        (local[keep], (rows[keep], cols[keep])), shape=(nfs, nfs)).tocsr()
    A_mat = sp.block_diag([A_scalar, A_scalar], format="csr")

    keep_e = rank >= 0
    cell_idx = np.broadcast_to(np.arange(nc)[:, None], rank.shape)
    b_rows = np.concatenate([cell_idx[keep_e], cell_idx[keep_e]])
    b_cols = np.concatenate([rank[keep_e], nfs + rank[keep_e]])
    e_vals = geo.cell_measure[:, None, None] * G  # (nc, 3, 2)
    b_data = np.concatenate([e_vals[:, :, 0][keep_e], e_vals[:, :, 1][keep_e]])
    B_mat = sp.coo_matrix((b_data, (b_rows, b_cols)), shape=(nc, 2 * nfs)).tocsr()

    b = np.zeros(2 * nfs)
    if f is not None:
        pts, w = cell_quadrature(mesh, geo, quad_degree)
        fv = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(nc, -1, 2)
        if not np.all(np.isfinite(fv)):
            raise ValueError("forcing evaluated to non-finite values")
        rel = pts - tab.cell_centroid[:, None, :]
        phi = 1.0 / 3.0 + np.einsum("cqd,cjd->cjq", rel, G)
        load = np.einsum("cq,cjq,cqi->cji", w, phi, fv)  # (nc, 3, 2)
        np.add.at(b, rank[keep_e], load[:, :, 0][keep_e])
        np.add.at(b, nfs + rank[keep_e], load[:, :, 1][keep_e])
    return A_mat, B_mat, b


# -- mass side -------------------------------------------------------

def interior_flux(u, mesh, geo):
    """Signed volume flux through every interior edge, out of the first
    incident cell: ``|sigma| * (edge velocity . normal)``."""
    ie = mesh.interior_edges
    return geo.edge_measure[ie] * np.einsum(
        "ed,ed->e", u.values[ie], geo.unit_normal[ie])


def edge_velocity_flux(u, mesh, geo, edge, cell):
    """Flux through one edge, signed outward for ``cell``."""
    if mesh.is_boundary_edge[edge]:
        raise ValueError(f"edge {edge} is a boundary edge; its flux is constrained to 0")
    K, L = mesh.edge_cells[edge]
    if cell not in (K, L):
        raise ValueError(f"cell {cell} is not incident to edge {edge}")
    v = geo.edge_measure[edge] * float(u.values[edge] @ geo.unit_normal[edge])
    return v if cell == K else -v


def upwind_density(rho_first, rho_second, flux):
    """Upwind value seen from the first cell; ties take the first cell."""
    return np.where(np.asarray(flux) >= 0.0, rho_first, rho_second)


def _stab_coef(mesh, geo, beta):
    ie = mesh.interior_edges
    K = mesh.edge_cells[ie, 0]
    L = mesh.edge_cells[ie, 1]
    return ((geo.cell_diameter[K] + geo.cell_diameter[L]) ** beta
            * geo.edge_measure[ie] / geo.edge_diameter[ie])


def assemble_mass_balance(mesh, geo, u, rho_prev, params, g=None):
    """Linearized upwind mass balance with both stabilizers.

    The jump-penalty weight ``|rho_prev_K + rho_prev_L|`` is frozen at the
    supplied previous density, making the system linear in the unknown
    density.  The right-hand side carries the anchor target
    ``h**alpha * |K| * rho_star`` plus the optional balanced source ``g``.
    """
    if not hasattr(u, "values"):
        raise TypeError("u must be a VelocityField")
    if not np.all(np.isfinite(u.values)):
        raise ValueError("velocity contains non-finite entries")
    rp = rho_prev.values if hasattr(rho_prev, "values") else np.asarray(rho_prev, dtype=float)
    if not np.all(np.isfinite(rp)):
        raise ValueError("previous density contains non-finite entries")

    nc = mesh.n_cells
    ie = mesh.interior_edges
    K = mesh.edge_cells[ie, 0]
    L = mesh.edge_cells[ie, 1]
    flux = interior_flux(u, mesh, geo)
    vplus = np.maximum(flux, 0.0)
    vminus = np.maximum(-flux, 0.0)
    coef = _stab_coef(mesh, geo, params.beta) * np.abs(rp[K] + rp[L])

    anchor = geo.h ** params.alpha * geo.cell_measure
    diag = anchor.copy()
    np.add.at(diag, K, vplus + coef)
    np.add.at(diag, L, vminus + coef)

    rows = np.concatenate([np.arange(nc), K, L])
    cols = np.concatenate([np.arange(nc), L, K])
    data = np.concatenate([diag, -(vminus + coef), -(vplus + coef)])
    matrix = sp.coo_matrix((data, (rows, cols)), shape=(nc, nc)).tocsr()

    rhs = anchor * params.rho_star
    if g is not None:
        g = np.asarray(g, dtype=float)
        scale = float(np.abs(g).max()) or 1.0
        if abs(g.sum()) > 1e-12 * scale * nc:
            raise ValueError(f"mass source must balance to zero, sum={g.sum():g}")
        rhs = rhs + g
    return SparseSystem(matrix=matrix, rhs=rhs, description="mass balance (frozen jump weight)")


def mass_row_values(u, rho, params, mesh, geo, g=None):
    """Rows of the genuinely nonlinear mass balance at (u, rho).

    Unlike the assembled system, the jump-penalty weight uses the density
    being evaluated, so a zero vector here means the nonlinear equations
    themselves hold.
    """
    rv = rho.values if hasattr(rho, "values") else np.asarray(rho, dtype=float)
    nc = mesh.n_cells
    ie = mesh.interior_edges
    K = mesh.edge_cells[ie, 0]
    L = mesh.edge_cells[ie, 1]
    flux = interior_flux(u, mesh, geo)
    vplus = np.maximum(flux, 0.0)
    vminus = np.maximum(-flux, 0.0)
    upw = vplus * rv[K] - vminus * rv[L]
    coef = _stab_coef(mesh, geo, params.beta)
    jump = coef * np.abs(rv[K] + rv[L]) * (rv[K] - rv[L])

    rows = geo.h ** params.alpha * geo.cell_measure * (rv - params.rho_star)
    np.add.at(rows, K, upw + jump)
    np.add.at(rows, L, -(upw + jump))
    if g is not None:
        rows = rows - np.asarray(g, dtype=float)
    return rows


@dataclass
class MMatrixReport:
    """Sign-structure and inverse-positivity audit of a mass system."""

    n: int
    diag_min: float
    offdiag_max: float
    colsum_min: float
    sign_ok: bool
    inverse_checked: bool
    inverse_min: float | None
    ok: bool
    notes: list = field(default_factory=list)


def verify_m_matrix(system, dense_threshold=200):
    """Check positive diagonal, nonpositive off-diagonal, nonnegative
    column sums; below ``dense_threshold`` also form the dense inverse and
    check entrywise nonnegativity up to roundoff."""
    A = system.matrix.tocoo()
    scale = float(np.abs(A.data).max()) or 1.0
    diag = system.matrix.diagonal()
    off_mask = A.row != A.col
    offdiag_max = float(A.data[off_mask].max()) if off_mask.any() else 0.0
    colsum = np.asarray(A.sum(axis=0)).ravel()

    notes = []
    sign_ok = True
    if diag.min() <= 0.0:
        sign_ok = False
        notes.append(f"nonpositive diagonal entry {diag.min():g}")
    if offdiag_max > 1e-14 * scale:
        sign_ok = False
        notes.append(f"positive off-diagonal entry {offdiag_max:g}")
    if colsum.min() < -1e-12 * scale:
        sign_ok = False
        notes.append(f"negative column sum {colsum.min():g}")

    inverse_checked = False
    inverse_min = None
    ok = sign_ok
    if system.n <= dense_threshold:
        inverse_checked = True
        inv = np.linalg.inv(system.matrix.toarray())
        inverse_min = float(inv.min())
        if inverse_min < -1e-12 * float(np.abs(inv).max()):
            ok = False
            notes.append(f"negative inverse entry {inverse_min:g}")
    return MMatrixReport(n=system.n, diag_min=float(diag.min()),
                         offdiag_max=offdiag_max, colsum_min=float(colsum.min()),
                         sign_ok=sign_ok, inverse_checked=inverse_checked,
                         inverse_min=inverse_min, ok=ok, notes=notes)


@dataclass
class ResidualTriple:
    """Raw defects of the coupled equations at a given state."""

    momentum: float         # Euclidean norm of the discrete momentum defect
    mass: float             # max cell row of the nonlinear mass balance
    mass_constraint: float  # |total mass - M|

    def as_dict(self):
        return {"momentum": self.momentum, "mass": self.mass,
                "mass_constraint": self.mass_constraint}


def nonlinear_residual(u, p, params, f, mesh, geo, dofmap,
                       quad_degree=6, momentum=None, g=None):
    """Residual triple of the coupled nonlinear equations at (u, p).

    ``momentum`` may carry a preassembled ``(A_mat, B_mat, b)`` to avoid
    repeating quadrature inside iteration loops.
    """
    if momentum is None:
        momentum = assemble_momentum(mesh, geo, dofmap, f, quad_degree)
    A_mat, B_mat, b = momentum
    uf = free_vector(u, dofmap)
    pv = p.values if hasattr(p, "values") else np.asarray(p, dtype=float)
    mom = float(np.linalg.norm(A_mat @ uf - b - B_mat.T @ pv))

    rho = params.A * pv
    rows = mass_row_values(u, rho, params, mesh, geo, g=g)
    mass = float(np.abs(rows).max())
    defect = float(abs(geo.cell_measure @ rho - params.M))
    return ResidualTriple(momentum=mom, mass=mass, mass_constraint=defect)
