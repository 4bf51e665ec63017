"""Damped fixed-point solver for the coupled velocity/density system.

Each sweep solves the linearized mass balance (jump-penalty weight frozen
at the previous density), damps the density update, converts density to
pressure through the linear law and solves the symmetric positive
definite momentum block.  Convergence is declared on the genuinely
nonlinear residual with the current, unfrozen weight.  Every mass solve
inherits positivity from the sign structure of the linearized system, so
the density stays positive at every iterate by construction; the solver
still checks and records it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cr_space import CellField, VelocityField
from .quadrature import cell_quadrature
from .scheme import (assemble_mass_balance, assemble_momentum,
                     nonlinear_residual, velocity_from_free)


@dataclass
class SolverControls:
    tol: float = 1e-9
    max_iter: int = 200
    omega: float = 1.0
    omega_min: float = 1.0 / 16.0
    linear_mode: str = "auto"       # auto | direct | cg
    direct_threshold: int = 50000   # auto switches to CG above this many unknowns
    cg_rtol: float = 1e-12
    cg_maxiter: int = 2000
    quad_degree: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.linear_mode not in ("auto", "direct", "cg"):
            raise ValueError(f"unknown linear mode {self.linear_mode!r}")
        if not (0.0 < self.omega <= 1.0):
            raise ValueError(f"damping factor must be in (0, 1], got {self.omega}")
        if self.max_iter < 1:
            raise ValueError(f"need at least one iteration, got {self.max_iter}")

    def as_dict(self):
        return {"tol": self.tol, "max_iter": self.max_iter, "omega": self.omega,
                "linear_mode": self.linear_mode, "cg_rtol": self.cg_rtol,
                "quad_degree": self.quad_degree, "seed": self.seed}


@dataclass
class Solution:
    u: VelocityField
    p: CellField
    rho: CellField
    params: object
    forcing: object = None  # callable echo, excluded from dumps


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual_history: list = field(default_factory=list)  # dicts per iterate
    min_rho_history: list = field(default_factory=list)
    omega_history: list = field(default_factory=list)
    final_residual: dict = field(default_factory=dict)
    combined_residual: float = float("nan")
    wall_time: float = 0.0
    seed: int = 0
    notes: list = field(default_factory=list)


def _cg(A, b, rtol, maxiter):
    try:
        return spla.cg(A, b, rtol=rtol, maxiter=maxiter)
    except TypeError:  # older scipy spells the tolerance differently
        return spla.cg(A, b, tol=rtol, maxiter=maxiter)


class MomentumSolver:
    """Reusable solver for the block-diagonal SPD momentum matrix.

    Holds one factorization of the scalar block (both velocity components
    share it).  CG runs per component and escalates to the direct path on
    non-convergence.
    """

    def __init__(self, A_mat, n_scalar, controls):
        self.A_scalar = A_mat[:n_scalar, :n_scalar].tocsc()
        self.n_scalar = n_scalar
        self.controls = controls
        use_direct = (controls.linear_mode == "direct"
                      or (controls.linear_mode == "auto"
                          and 2 * n_scalar <= controls.direct_threshold))
        self._lu = spla.splu(self.A_scalar) if use_direct else None
        self.escalations = 0

    def _solve_component(self, rhs):
        if self._lu is not None:
            return self._lu.solve(rhs)
        x, info = _cg(self.A_scalar, rhs,
                      self.controls.cg_rtol, self.controls.cg_maxiter)
        if info != 0:
            self.escalations += 1
            self._lu = spla.splu(self.A_scalar)
            return self._lu.solve(rhs)
        return x

    def solve(self, rhs):
        n = self.n_scalar
        return np.concatenate([self._solve_component(rhs[:n]),
                               self._solve_component(rhs[n:])])


def solve_momentum(A_mat, rhs, controls=None, n_scalar=None):
    """One-shot momentum solve; ``n_scalar`` defaults to half the size."""
    controls = controls or SolverControls()
    if n_scalar is None:
        n_scalar = A_mat.shape[0] // 2
    return MomentumSolver(A_mat, n_scalar, controls).solve(rhs)


def solve_mass(system, controls=None):
    """Solve a linearized mass system, guaranteeing a positive density.

    The direct path is authoritative.  The stationary (Jacobi) path used
    for large systems falls back to the direct path if it stalls or if
    rounding produces a nonpositive entry.
    """
    controls = controls or SolverControls()
    n = system.n
    use_direct = (controls.linear_mode != "cg"
                  and (controls.linear_mode == "direct" or n <= controls.direct_threshold))
    rho = None
    if not use_direct:
        A = system.matrix
        d = A.diagonal()
        off = A - sp.diags(d)
        x = system.rhs / d
        for _ in range(controls.cg_maxiter):
            x_new = (system.rhs - off @ x) / d
            if np.linalg.norm(x_new - x, ord=np.inf) <= controls.cg_rtol * max(
                    1.0, np.linalg.norm(x_new, ord=np.inf)):
                x = x_new
                break
            x = x_new
        else:
            x = None
        if x is not None and np.all(x > 0.0):
            rho = x
    if rho is None:
        rho = spla.spsolve(system.matrix.tocsc(), system.rhs)
    if not np.all(np.isfinite(rho)):
        raise RuntimeError("mass solve produced non-finite density")
    if rho.min() <= 0.0:
        raise RuntimeError(
            f"mass solve produced nonpositive density (min {rho.min():g}); "
            "the linearized system has lost its sign structure")
    return rho


def forcing_norm(f, mesh, geo, degree=6):
    """L2 norm of the forcing, used to scale the momentum residual."""
    if f is None:
        return 0.0
    pts, w = cell_quadrature(mesh, geo, degree)
    fv = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(mesh.n_cells, -1, 2)
    return float(np.sqrt(((fv ** 2).sum(axis=2) * w).sum()))


def combined_residual(triple, f_scale, params):
    """Equal-weight sum of the residual components, each made dimensionless."""
    return (triple.momentum / f_scale
            + triple.mass / params.rho_star
            + triple.mass_constraint / params.M)


def picard_solve(mesh, geo, dofmap, params, f=None, controls=None, g=None):
    """Run the damped fixed-point iteration from the flat state.

    Starts at constant density ``rho_star`` and zero velocity.  The
    damping factor halves after three consecutive increases of the
    combined residual, down to ``omega_min``.  Non-finite iterates abort
    with the iteration index; hitting the iteration budget returns the
    best iterate with ``converged=False``.
    """
    controls = controls or SolverControls()
    t0 = time.perf_counter()
    A_mat, B_mat, b = assemble_momentum(mesh, geo, dofmap, f, controls.quad_degree)
    msolver = MomentumSolver(A_mat, dofmap.n_free_scalar, controls)
    f_scale = forcing_norm(f, mesh, geo, controls.quad_degree) or 1.0

    rho = np.full(mesh.n_cells, params.rho_star)
    u = velocity_from_free(np.zeros(dofmap.n_free), dofmap)
    report = SolveReport(converged=False, iterations=0, seed=controls.seed)

    omega = controls.omega
    streak = 0
    prev_combined = np.inf
    best = None

    for it in range(1, controls.max_iter + 1):
        system = assemble_mass_balance(mesh, geo, u, rho, params, g=g)
        rho_new = solve_mass(system, controls)
        rho = (1.0 - omega) * rho + omega * rho_new
        if not np.all(np.isfinite(rho)):
            raise RuntimeError(f"non-finite density at iteration {it}")
        p = rho / params.A
        uf = msolver.solve(b + B_mat.T @ p)
        if not np.all(np.isfinite(uf)):
            raise RuntimeError(f"non-finite velocity at iteration {it}")
        u = velocity_from_free(uf, dofmap)

        triple = nonlinear_residual(u, CellField(mesh, p), params, f, mesh, geo,
                                    dofmap, controls.quad_degree,
                                    momentum=(A_mat, B_mat, b), g=g)
        comb = combined_residual(triple, f_scale, params)
        report.residual_history.append({**triple.as_dict(), "combined": comb})
        report.min_rho_history.append(float(rho.min()))
        report.omega_history.append(omega)
        report.iterations = it

        if best is None or comb < best[0]:
            best = (comb, rho.copy(), u.copy(), triple)
        if comb <= controls.tol:
            report.converged = True
            break
        if comb > prev_combined:
            streak += 1
            if streak >= 3 and omega > controls.omega_min:
                omega = max(omega / 2.0, controls.omega_min)
                report.notes.append(f"iteration {it}: damping reduced to {omega:g}")
                streak = 0
        else:
            streak = 0
        prev_combined = comb

    if not report.converged and best is not None:
        _, rho, u, triple = best
        p = rho / params.A
        report.notes.append("iteration budget exhausted; returning best iterate")

    report.final_residual = triple.as_dict()
    report.combined_residual = combined_residual(triple, f_scale, params)
    report.wall_time = time.perf_counter() - t0
    solution = Solution(u=u, p=CellField(mesh, p), rho=CellField(mesh, rho),
                        params=params, forcing=f)
    return solution, report


def solution_summary(solution, report, geo, include_timing=True):
    """JSON-ready summary of a solve."""
    rho = solution.rho.values
    p = solution.p.values
    out = {
        "params": solution.params.as_dict(),
        "converged": report.converged,
        "iterations": report.iterations,
        "residuals": report.final_residual,
        "combined_residual": report.combined_residual,
        "min_rho": float(rho.min()),
        "min_rho_history": report.min_rho_history,
        "integrals": {
            "total_mass": float(geo.cell_measure @ rho),
            "mean_pressure": float(geo.cell_measure @ p / geo.domain_measure),
        },
        "notes": report.notes,
    }
    if include_timing:
        out["wall_time"] = report.wall_time
    return out


def _render_json(x, pad):
    nxt = pad + "  "
    if isinstance(x, dict):
        if not x:
            return "{}"
        rows = [f"{nxt}{json.dumps(str(k))}: {_render_json(v, nxt)}"
                for k, v in sorted(x.items())]
        return "{\n" + ",\n".join(rows) + "\n" + pad + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        seq = list(x)
        if not seq:
            return "[]"
        rows = [f"{nxt}{_render_json(v, nxt)}" for v in seq]
        return "[\n" + ",\n".join(rows) + "\n" + pad + "]"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return json.dumps(x)


def canonical_json(obj):
    """JSON text with sorted keys and floats at 17 significant digits.

    Byte-stable across runs for identical content, which is what the
    reproducibility checks diff against.
    """
    return _render_json(obj, "") + "\n"


def write_summary(summary, path):
    with open(path, "w") as fh:
        fh.write(canonical_json(summary))
