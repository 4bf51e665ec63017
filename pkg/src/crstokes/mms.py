"""Manufactured solutions with an exactly mass-free velocity.

The momentum field is the rotated gradient of a stream potential built
from the squared tensor bump ``(x(1-x)y(1-y))**2`` times a trigonometric
mode, so it is divergence free and vanishes (with its gradient) on the
boundary of the unit square.  Dividing by the manufactured density gives
a velocity whose mass flux is zero identically, which keeps the mass
equation homogeneous; only the momentum equation needs a forcing.
Forcings are derived symbolically; a fourth-order finite-difference path
exists as an independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import sympy as sym

from .cr_space import (broken_h1_error, broken_h1_seminorm, interpolate_cr,
                       l2_error)
from .mesh import build_structured, compute_geometry, refine_uniform
from .quadrature import cell_quadrature, gauss_segment
from .scheme import SchemeParams
from .solver import SolverControls, picard_solve

_BUMP_SCALE = 16.0  # keeps velocity magnitudes of order one

# mode id -> (stream trig factor, pressure perturbation, amplitude)
_MODES = {
    0: (lambda x, y: sym.Integer(1), lambda x, y: sym.Integer(0), 0.0),
    1: (lambda x, y: sym.sin(sym.pi * x) * sym.sin(sym.pi * y),
        lambda x, y: sym.cos(sym.pi * x) * sym.cos(sym.pi * y), 0.3),
    2: (lambda x, y: sym.sin(2 * sym.pi * x) * sym.sin(sym.pi * y),
        lambda x, y: sym.sin(sym.pi * x) * sym.sin(sym.pi * y), 0.25),
    3: (lambda x, y: sym.cos(sym.pi * x) * sym.cos(2 * sym.pi * y),
        lambda x, y: sym.cos(2 * sym.pi * x) * sym.cos(sym.pi * y), 0.2),
}


def _vectorized(fn):
    def call(pts):
        pts = np.asarray(pts, dtype=float)
        out = np.asarray(fn(pts[..., 0], pts[..., 1]), dtype=float)
        return np.broadcast_to(out, pts.shape[:-1]).copy()
    return call


def _vector_field(fx, fy):
    def call(pts):
        pts = np.asarray(pts, dtype=float)
        return np.stack([fx(pts), fy(pts)], axis=-1)
    return call


@dataclass
class ManufacturedCase:
    """A certified exact solution of the coupled system.

    ``u``, ``grad_u``, ``p``, ``rho`` and ``f`` are vectorized callables
    on (n, 2) point arrays.  Certification (run at construction): the
    velocity mass flux is divergence free and the velocity vanishes on
    the boundary pointwise, the density integrates to ``M`` and the
    pressure is bounded away from zero.
    """

    A: float
    M: float
    mode: int
    forcing_kind: str
    u: object
    grad_u: object
    p: object
    rho: object
    f: object
    certification: dict = field(default_factory=dict)

    @property
    def rect(self):
        return (0.0, 0.0, 1.0, 1.0)


def _fd_forcing(u_fn, p_fn, h_fd=1e-5):
    """-laplace(u) + grad(p) by fourth-order central differences."""
    stencil2 = ((-2, -1.0), (-1, 16.0), (0, -30.0), (1, 16.0), (2, -1.0))
    stencil1 = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))

    def call(pts):
        pts = np.asarray(pts, dtype=float)
        lap = np.zeros(pts.shape)
        gradp = np.zeros(pts.shape)
        for axis in (0, 1):
            for off, c in stencil2:
                q = pts.copy()
                q[..., axis] += off * h_fd
                lap += c * u_fn(q)
            for off, c in stencil1:
                q = pts.copy()
                q[..., axis] += off * h_fd
                gradp[..., axis] += c * p_fn(q)
        return -lap / (12.0 * h_fd ** 2) + gradp / (12.0 * h_fd)
    return call


@lru_cache(maxsize=None)
def _symbolic_pieces(A, M, mode):
    if mode not in _MODES:
        raise ValueError(f"unknown manufactured mode {mode}; have {sorted(_MODES)}")
    x, y = sym.symbols("x y", real=True)
    trig, perturb, amp = _MODES[mode]
    bump = x * (1 - x) * y * (1 - y)
    psi = _BUMP_SCALE * bump ** 2 * trig(x, y)
    m1 = sym.diff(psi, y)
    m2 = -sym.diff(psi, x)

    p_raw = 1 + sym.Rational(amp).limit_denominator(10**6) * perturb(x, y) \
        if amp else sym.Integer(1)
    mean_raw = sym.integrate(sym.integrate(p_raw, (x, 0, 1)), (y, 0, 1))
    scale = M / (A * float(mean_raw))
    p = scale * p_raw
    rho = A * p
    u1 = sym.cancel(m1 / rho)
    u2 = sym.cancel(m2 / rho)
    f1 = -sym.diff(u1, x, 2) - sym.diff(u1, y, 2) + sym.diff(p, x)
    f2 = -sym.diff(u2, x, 2) - sym.diff(u2, y, 2) + sym.diff(p, y)
    div_m = sym.diff(m1, x) + sym.diff(m2, y)

    lam = lambda e: _vectorized(sym.lambdify((x, y), e, "numpy"))
    return {
        "u": (lam(u1), lam(u2)),
        "grad_u": tuple(lam(sym.diff(c, v)) for c in (u1, u2) for v in (x, y)),
        "p": lam(p),
        "rho": lam(rho),
        "f": (lam(f1), lam(f2)),
        "div_m": lam(div_m),
    }


def stream_function_case(A=1.0, M=1.0, mode=0, forcing="symbolic"):
    """Build and certify a manufactured case on the unit square."""
    if forcing not in ("symbolic", "fd"):
        raise ValueError(f"forcing must be 'symbolic' or 'fd', got {forcing!r}")
    if A <= 0 or M <= 0:
        raise ValueError(f"A and M must be positive, got A={A}, M={M}")
    pieces = _symbolic_pieces(float(A), float(M), int(mode))
    u = _vector_field(*pieces["u"])
    gu = pieces["grad_u"]

    def grad_u(pts):
        pts = np.asarray(pts, dtype=float)
        out = np.empty(pts.shape[:-1] + (2, 2))
        out[..., 0, 0] = gu[0](pts)
        out[..., 0, 1] = gu[1](pts)
        out[..., 1, 0] = gu[2](pts)
        out[..., 1, 1] = gu[3](pts)
        return out

    p = pieces["p"]
    rho = pieces["rho"]
    f = _vector_field(*pieces["f"]) if forcing == "symbolic" else _fd_forcing(u, p)

    cert = _certify(u, rho, p, pieces["div_m"], M)
    return ManufacturedCase(A=float(A), M=float(M), mode=int(mode),
                            forcing_kind=forcing, u=u, grad_u=grad_u,
                            p=p, rho=rho, f=f, certification=cert)


def _certify(u, rho, p, div_m, M):
    s = np.linspace(0.0, 1.0, 33)
    X, Y = np.meshgrid(s, s)
    grid = np.column_stack([X.ravel(), Y.ravel()])
    div_max = float(np.abs(div_m(grid)).max())
    if div_max > 1e-10:
        raise ValueError(f"mass flux is not divergence free: max {div_max:g}")

    edge = np.concatenate([
        np.column_stack([s, np.zeros_like(s)]),
        np.column_stack([s, np.ones_like(s)]),
        np.column_stack([np.zeros_like(s), s]),
        np.column_stack([np.ones_like(s), s])])
    bnd_max = float(np.abs(u(edge)).max())
    if bnd_max > 1e-12:
        raise ValueError(f"velocity does not vanish on the boundary: max {bnd_max:g}")

    t, w = gauss_segment(24)
    QX, QY = np.meshgrid(t, t)
    qpts = np.column_stack([QX.ravel(), QY.ravel()])
    qw = np.outer(w, w).ravel()
    total = float(qw @ rho(qpts))
    if abs(total - M) > 1e-12 * max(M, 1.0):
        raise ValueError(f"density integrates to {total:.17g}, expected {M:g}")

    fine = np.linspace(0.0, 1.0, 101)
    FX, FY = np.meshgrid(fine, fine)
    pv = p(np.column_stack([FX.ravel(), FY.ravel()]))
    p_min = float(pv.min())
    if p_min <= 1e-6 * float(pv.max()):
        raise ValueError(f"pressure not bounded away from zero: min {p_min:g}")
    return {"div_flux_max": div_max, "boundary_velocity_max": bnd_max,
            "total_mass": total, "p_min": p_min}


# -- error measurement and studies -----------------------------------

@dataclass
class ErrorReport:
    h: float
    u_h1b: float          # broken H1 distance to the exact velocity
    u_h1b_interp: float   # broken H1 distance to the exact field's edge-mean interpolant
    u_l2: float
    p_l2: float           # distance to the cellwise mean of the exact pressure

    def as_dict(self):
        return {"h": self.h, "err_u_h1b": self.u_h1b,
                "err_u_h1b_interp": self.u_h1b_interp,
                "err_u_l2": self.u_l2, "err_p_l2": self.p_l2}


def compute_errors(solution, case, geo, quad_degree=8):
    mesh = solution.u.mesh
    if quad_degree < 1:
        raise ValueError(f"quadrature degree must be >= 1, got {quad_degree}")
    interp = interpolate_cr(mesh, case.u, expect_zero_trace=True)
    diff = solution.u.copy()
    diff.values = diff.values - interp.values
    u_h1b_interp = broken_h1_seminorm(diff, geo)
    u_h1b = broken_h1_error(solution.u, case.grad_u, geo, quad_degree)
    u_l2 = l2_error(solution.u, case.u, geo, quad_degree)

    pts, w = cell_quadrature(mesh, geo, quad_degree)
    p_mean = (case.p(pts.reshape(-1, 2)).reshape(w.shape) * w).sum(axis=1) / geo.cell_measure
    p_l2 = float(np.sqrt(geo.cell_measure @ (solution.p.values - p_mean) ** 2))
    return ErrorReport(h=geo.h, u_h1b=u_h1b, u_h1b_interp=u_h1b_interp,
                       u_l2=u_l2, p_l2=p_l2)


def fit_rate(hs, errs):
    """Least-squares slope of log(err) against log(h) and its R^2."""
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if len(hs) < 3 or np.any(errs <= 0.0):
        return float("nan"), float("nan")
    lx, ly = np.log(hs), np.log(errs)
    slope, intercept = np.polyfit(lx, ly, 1)
    fitted = slope * lx + intercept
    ss_res = float(((ly - fitted) ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return float(slope), r2


@dataclass
class RateTable:
    rows: list = field(default_factory=list)     # dicts: level, h, errors, converged
    slopes: dict = field(default_factory=dict)   # column -> (slope, r2)

    def column(self, name):
        return [r[name] for r in self.rows]

    def fit(self):
        ok = [r for r in self.rows if r.get("converged", True)]
        hs = [r["h"] for r in ok]
        for name in ("err_u_h1b", "err_u_l2", "err_p_l2"):
            self.slopes[name] = fit_rate(hs, [r[name] for r in ok])
        return self

    def to_csv(self, path, config_hash=None):
        with open(path, "w") as fh:
            fh.write("level,h,err_u_h1b,err_u_l2,err_p_l2\n")
            for r in self.rows:
                fh.write(f"{r['level']},{r['h']:.17g},{r['err_u_h1b']:.17g},"
                         f"{r['err_u_l2']:.17g},{r['err_p_l2']:.17g}\n")
            for name, (slope, r2) in self.slopes.items():
                fh.write(f"# slope_{name}={slope:.17g}\n")
                fh.write(f"# r2_{name}={r2:.17g}\n")
            if config_hash is not None:
                fh.write(f"# config_hash={config_hash}\n")


@dataclass
class StudyResult:
    table: RateTable
    solutions: list
    reports: list
    meshes: list
    geos: list


def convergence_study(case, levels, alpha=1.0, beta=1.0, base=(4, 4),
                      controls=None, keep_solutions=True, n_jobs=1):
    """Solve the manufactured case on a refinement family and tabulate errors.

    `base` is either an (nx, ny) pair for a structured mesh on the case
    rectangle or an already-built coarse mesh.  Non-converged levels are
    flagged in the table and skipped by the slope fit.  With n_jobs > 1
    the independent level solves run on a thread pool; results are
    identical to the sequential path.
    """
    from .cr_space import build_dofmap
    if levels < 1:
        raise ValueError(f"need at least one level, got {levels}")
    controls = controls or SolverControls()
    mesh = base if hasattr(base, "n_cells") else build_structured(*base, rect=case.rect)
    meshes = [mesh]
    for _ in range(1, levels):
        meshes.append(refine_uniform(meshes[-1]))

    def run_level(level):
        geo = compute_geometry(meshes[level])
        dofmap = build_dofmap(meshes[level])
        params = SchemeParams.from_geometry(geo, A=case.A, M=case.M,
                                            alpha=alpha, beta=beta)
        solution, report = picard_solve(meshes[level], geo, dofmap, params,
                                        f=case.f, controls=controls)
        err = compute_errors(solution, case, geo)
        return geo, solution, report, err

    if n_jobs > 1 and levels > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=min(n_jobs, levels)) as pool:
            per_level = list(pool.map(run_level, range(levels)))
    else:
        per_level = [run_level(level) for level in range(levels)]

    table = RateTable()
    result = StudyResult(table=table, solutions=[], reports=[], meshes=[], geos=[])
    for level, (geo, solution, report, err) in enumerate(per_level):
        table.rows.append({"level": level, "converged": report.converged,
                           **err.as_dict()})
        if keep_solutions:
            result.solutions.append(solution)
            result.reports.append(report)
            result.meshes.append(meshes[level])
            result.geos.append(geo)
    table.fit()
    return result
