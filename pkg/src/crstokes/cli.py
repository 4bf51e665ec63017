"""Command line front end.

Four subcommands: ``solve`` (one nonlinear solve, CSV fields plus a JSON
summary), ``study`` (refinement family, error table with fitted rates),
``verify`` (the full audit battery on a refinement family) and
``mesh-info`` (geometry and regularity report).  Runs are reproducible:
every output embeds a hash of the resolved configuration, floats are
printed with 17 significant digits, and with ``--no-timestamp`` a rerun
of the same configuration is byte-identical.

Exit codes: 0 success, 2 configuration error, 3 non-convergence,
4 audit failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import (AuditEntry, AuditReport, audit_entropy,
                       check_divergence_preservation, check_inequalities,
                       check_interp_rates, check_log_mean_bracket,
                       default_test_family, infsup_constant,
                       translate_constant, weak_residuals)
from .cr_space import build_dofmap, interpolate_cr, write_cell_csv, write_edge_csv
from .mesh import (MeshError, build_structured, compute_geometry, read_mesh,
                   regularity_theta)
from .mms import convergence_study, stream_function_case
from .scheme import SchemeParams, assemble_mass_balance, verify_m_matrix
from .solver import (SolverControls, canonical_json, picard_solve,
                     solution_summary, write_summary)


class ConfigError(Exception):
    """Invalid configuration; maps to exit code 2."""


_STRUCTURED = re.compile(r"^(\d+)x(\d+)$")
_PARAM_KEYS = ("A", "M", "alpha", "beta")
_CONTROL_KEYS = ("tol", "max_iter", "omega", "omega_min", "linear_mode",
                 "direct_threshold", "cg_rtol", "cg_maxiter", "quad_degree",
                 "seed")
_TOP_KEYS = ("mesh", "levels", "mode", "out", "csv", "timestamp",
             "params", "controls")
_INT_KEYS = {"max_iter", "direct_threshold", "cg_maxiter", "quad_degree",
             "seed", "levels", "mode"}
_STR_KEYS = {"linear_mode", "mesh", "out"}
_BOOL_KEYS = {"csv", "timestamp"}


@dataclass
class RunConfig:
    """Fully resolved run description; one mesh source, explicit rest."""

    command: str
    mesh: str = "4x4"
    levels: int | None = None
    mode: int | None = None
    out: str = "."
    csv: bool = False
    timestamp: bool = True
    params: dict = field(default_factory=dict)
    controls: dict = field(default_factory=dict)


def _coerce(key, value, where):
    """Type-check one scalar config value; ints tolerate float spellings."""
    if key in _BOOL_KEYS:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: {key} must be a boolean, got {value!r}")
    if key in _STR_KEYS:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where}: {key} must be a string, got {value!r}")
    if isinstance(value, bool) or value is None:
        raise ConfigError(f"{where}: {key} must be a number, got {value!r}")
    if key in _INT_KEYS:
        try:
            if int(value) != float(value):
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: {key} must be an integer, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: {key} must be a number, got {value!r}")


def _apply_mapping(cfg, data, where):
    for key, value in data.items():
        if key not in _TOP_KEYS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        if key in ("params", "controls"):
            allowed = _PARAM_KEYS if key == "params" else _CONTROL_KEYS
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: {key} must be an object")
            target = getattr(cfg, key)
            for sub, subval in value.items():
                if sub not in allowed:
                    raise ConfigError(f"{where}: unknown {key} key {sub!r}")
                target[sub] = _coerce(sub, subval, where)
        elif key == "mode" and value is None:
            cfg.mode = None
        else:
            setattr(cfg, key, _coerce(key, value, where))


def _apply_param_overrides(cfg, overrides):
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--param needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if "." in key:
            group, sub = key.split(".", 1)
            if group not in ("params", "controls"):
                raise ConfigError(f"--param: unknown key {key!r}")
            _apply_mapping(cfg, {group: {sub: value}}, "--param")
        else:
            _apply_mapping(cfg, {key: value}, "--param")


def load_config(ns):
    """Merge defaults, the JSON config file, flags and --param overrides."""
    cfg = RunConfig(command=ns.command)
    if ns.config:
        try:
            with open(ns.config) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"{ns.config}: no such config file")
        except json.JSONDecodeError as err:
            raise ConfigError(f"{ns.config}:{err.lineno}:{err.colno}: {err.msg}")
        if not isinstance(data, dict):
            raise ConfigError(f"{ns.config}: top level must be an object")
        _apply_mapping(cfg, data, ns.config)
    if ns.mesh is not None:
        cfg.mesh = ns.mesh
    if ns.levels is not None:
        cfg.levels = ns.levels
    if ns.out is not None:
        cfg.out = ns.out
    if ns.csv:
        cfg.csv = True
    if ns.no_timestamp:
        cfg.timestamp = False
    _apply_param_overrides(cfg, ns.param)

    if cfg.levels is None:
        cfg.levels = {"study": 4, "verify": 3}.get(cfg.command)
    if cfg.mode is None and cfg.command in ("study", "verify"):
        cfg.mode = 0
    if cfg.levels is not None and cfg.levels < 1:
        raise ConfigError(f"levels must be >= 1, got {cfg.levels}")
    if cfg.command == "verify" and cfg.levels < 3:
        raise ConfigError("verify needs at least 3 levels for the trend checks")
    if cfg.mode is not None and cfg.mode not in (0, 1, 2, 3):
        raise ConfigError(f"mode must be one of 0..3, got {cfg.mode}")
    return cfg


def resolved_params(cfg):
    out = {"A": 1.0, "M": 1.0, "alpha": 1.0, "beta": 1.0}
    out.update(cfg.params)
    if out["A"] <= 0 or out["M"] <= 0:
        raise ConfigError("params.A and params.M must be positive")
    return out


def resolved_controls(cfg):
    base = SolverControls()
    kwargs = {key: getattr(base, key) for key in _CONTROL_KEYS}
    kwargs.update(cfg.controls)
    try:
        return SolverControls(**kwargs)
    except ValueError as err:
        raise ConfigError(f"controls: {err}")


def config_hash(cfg):
    """Hash of everything that determines the numerical result."""
    payload = {
        "command": cfg.command,
        "mesh": cfg.mesh,
        "levels": cfg.levels,
        "mode": cfg.mode,
        "params": resolved_params(cfg),
        "controls": {key: getattr(resolved_controls(cfg), key)
                     for key in _CONTROL_KEYS},
    }
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def load_run_mesh(cfg):
    """Mesh from the single configured source: NXxNY or a file path."""
    match = _STRUCTURED.match(cfg.mesh)
    if match:
        nx, ny = int(match.group(1)), int(match.group(2))
        if nx < 1 or ny < 1:
            raise ConfigError(f"structured mesh needs positive counts, got {cfg.mesh}")
        return build_structured(nx, ny), f"structured {nx}x{ny}"
    try:
        return read_mesh(cfg.mesh), cfg.mesh
    except FileNotFoundError:
        raise ConfigError(f"{cfg.mesh}: no such mesh file")
    except MeshError as err:
        raise ConfigError(str(err))


def _thread_budget():
    raw = os.environ.get("CRSTOKES_THREADS", "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"CRSTOKES_THREADS must be a positive integer, got {raw!r}")
    return n


def _stamp(payload, cfg):
    if cfg.timestamp:
        payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    return payload


def _mesh_block(mesh, geo, src):
    quality = regularity_theta(mesh, geo)
    return {
        "source": src,
        "n_vertices": mesh.n_vertices,
        "n_cells": mesh.n_cells,
        "n_edges": mesh.n_edges,
        "n_interior_edges": int(len(mesh.interior_edges)),
        "domain_measure": geo.domain_measure,
        "h": geo.h,
        "theta": quality.theta,
        "pair_bound_max": quality.pair_bound_max,
        "pair_bound_violations": len(quality.pair_bound_violations),
    }


# -- subcommands -----------------------------------------------------

def cmd_mesh_info(cfg):
    mesh, src = load_run_mesh(cfg)
    geo = compute_geometry(mesh)
    block = _mesh_block(mesh, geo, src)
    digest = config_hash(cfg)
    print(f"mesh: {src} ({block['n_vertices']} vertices, {block['n_cells']} cells, "
          f"{block['n_edges']} edges, {block['n_interior_edges']} interior)")
    print(f"domain measure = {block['domain_measure']:.17g}")
    print(f"mesh size h = {block['h']:.17g}")
    print(f"theta = {block['theta']:.6f}")
    print(f"pair bound: max ratio {block['pair_bound_max']:.17g}, "
          f"violations {block['pair_bound_violations']}")
    os.makedirs(cfg.out, exist_ok=True)
    payload = _stamp({"command": "mesh-info", "config_hash": digest, "mesh": block}, cfg)
    write_summary(payload, os.path.join(cfg.out, "mesh_info.json"))
    return 0


def cmd_solve(cfg):
    mesh, src = load_run_mesh(cfg)
    geo = compute_geometry(mesh)
    dofmap = build_dofmap(mesh)
    pars = resolved_params(cfg)
    params = SchemeParams.from_geometry(geo, **pars)
    controls = resolved_controls(cfg)
    forcing = None
    if cfg.mode is not None:
        forcing = stream_function_case(A=pars["A"], M=pars["M"], mode=cfg.mode).f
    solution, report = picard_solve(mesh, geo, dofmap, params,
                                    f=forcing, controls=controls)
    digest = config_hash(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    write_edge_csv(solution.u, os.path.join(cfg.out, "u_edge.csv"), config_hash=digest)
    write_cell_csv(solution.p, os.path.join(cfg.out, "p_cell.csv"), config_hash=digest)
    write_cell_csv(solution.rho, os.path.join(cfg.out, "rho_cell.csv"), config_hash=digest)
    summary = solution_summary(solution, report, geo, include_timing=cfg.timestamp)
    summary.update({"command": "solve", "config_hash": digest, "mode": cfg.mode,
                    "mesh": _mesh_block(mesh, geo, src)})
    write_summary(_stamp(summary, cfg), os.path.join(cfg.out, "summary.json"))
    state = "converged" if report.converged else "did not converge"
    print(f"solve {state} in {report.iterations} iterations, "
          f"residual {report.combined_residual:.3e}, "
          f"min rho {solution.rho.values.min():.17g}")
    return 0 if report.converged else 3


def cmd_study(cfg):
    mesh, src = load_run_mesh(cfg)
    pars = resolved_params(cfg)
    controls = resolved_controls(cfg)
    case = stream_function_case(A=pars["A"], M=pars["M"], mode=cfg.mode)
    result = convergence_study(case, cfg.levels, alpha=pars["alpha"],
                               beta=pars["beta"], base=mesh, controls=controls,
                               keep_solutions=False, n_jobs=_thread_budget())
    digest = config_hash(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    result.table.to_csv(os.path.join(cfg.out, "rates.csv"), config_hash=digest)
    payload = {
        "command": "study", "config_hash": digest, "mode": cfg.mode,
        "levels": cfg.levels, "mesh": src, "params": pars,
        "rows": result.table.rows,
        "slopes": {name: {"slope": s, "r2": r}
                   for name, (s, r) in result.table.slopes.items()},
        "all_converged": all(r["converged"] for r in result.table.rows),
    }
    write_summary(_stamp(payload, cfg), os.path.join(cfg.out, "study.json"))
    for name, (slope, r2) in result.table.slopes.items():
        print(f"{name}: slope {slope:.4f} (r2 {r2:.4f})")
    return 0 if payload["all_converged"] else 3


def _trend_entry(check, anchor, trend, passed, **values):
    return AuditEntry(check=check, anchor=anchor, trend=[float(t) for t in trend],
                      values=values, passed=bool(passed))


def _within_factor(values, factor):
    return bool(values[0] > 0 and max(values) <= factor * values[0])


def _monotone(values, slack=0.1):
    return all(values[i + 1] <= (1.0 + slack) * values[i]
               for i in range(len(values) - 1))


def run_verification(cfg, mesh, src):
    """Full audit battery on the refinement family rooted at `mesh`.

    Returns (report, all_solves_converged)."""
    pars = resolved_params(cfg)
    controls = resolved_controls(cfg)
    levels = cfg.levels
    case = stream_function_case(A=pars["A"], M=pars["M"], mode=cfg.mode)
    study = convergence_study(case, levels, alpha=pars["alpha"], beta=pars["beta"],
                              base=mesh, controls=controls, keep_solutions=True,
                              n_jobs=_thread_budget())
    meshes, geos = study.meshes, study.geos
    report = AuditReport()
    fam = default_test_family()
    smooth, smooth_grad = fam[3].value, fam[3].grad

    # mesh regularity across the family
    quality = [regularity_theta(m, g) for m, g in zip(meshes, geos)]
    report.add(_trend_entry(
        "mesh_regularity", "shape regularity and cell/edge size bound",
        [q.theta for q in quality],
        all(not q.pair_bound_violations for q in quality),
        pair_bound_max=max(q.pair_bound_max for q in quality)))

    # interpolation identity and orders
    poly = lambda x: np.stack([x[:, 0] ** 2 - x[:, 1], x[:, 0] * x[:, 1]], axis=1)
    poly_div = lambda x: 3.0 * x[:, 0]
    div_entries = [check_divergence_preservation(m, g, poly, poly_div)
                   for m, g in zip(meshes, geos)]
    report.add(_trend_entry(
        "divergence_preservation", div_entries[0].anchor,
        [e.values["max_mismatch"] for e in div_entries],
        all(e.passed for e in div_entries),
        tol=div_entries[0].values["tol"]))
    report.add(check_interp_rates(smooth, smooth_grad, levels=levels, base=mesh))

    # inequality constants: explicit bounds per level, trends for the rest
    per_level = [check_inequalities(m, g, seed=controls.seed)
                 for m, g in zip(meshes, geos)]
    by_name = {e.check: [lvl[i] for lvl in per_level]
               for i, e in enumerate(per_level[0])}
    report.add(_trend_entry(
        "jump_control", per_level[0][0].anchor,
        [e.values["max_ratio"] for e in by_name["jump_control"]],
        all(e.passed for e in by_name["jump_control"]),
        provable_bounds=[e.values["provable_bound"] for e in by_name["jump_control"]]))
    for name in ("trace_inequality", "mean_deviation"):
        entries = by_name[name]
        report.add(_trend_entry(
            name, entries[0].anchor,
            [e.values["max_ratio_vs_bound"] for e in entries],
            all(e.passed for e in entries)))
    pairing = [e.values["max_constant"] for e in by_name["jump_pairing"]]
    report.add(_trend_entry(
        "jump_pairing", by_name["jump_pairing"][0].anchor,
        pairing, _within_factor(pairing, 2.0)))

    translate = []
    for m, g in zip(meshes, geos):
        v = interpolate_cr(m, smooth)
        translate.append(translate_constant(v, g, np.array([g.h, 0.0])))
    report.add(_trend_entry(
        "translate_estimate", "translate norm bound on zero extensions",
        translate, _within_factor(translate, 2.0)))

    infsup = [infsup_constant(m, g, seed=controls.seed) for m, g in zip(meshes, geos)]
    consts = [r.constant for r in infsup]
    report.add(_trend_entry(
        "infsup", "velocity/pressure coupling stays uniformly stable",
        consts,
        all(c > 0 for c in consts) and min(consts) >= 0.5 * consts[0],
        methods=[r.method for r in infsup]))

    report.add(check_log_mean_bracket(seed=controls.seed))

    # the solve family: convergence rate plus per-solution structure
    slope, r2 = study.table.slopes["err_u_h1b"]
    all_converged = all(r["converged"] for r in study.table.rows)
    report.add(_trend_entry(
        "scheme_convergence", "velocity energy error decays at first order",
        [r["err_u_h1b"] for r in study.table.rows],
        all_converged and 0.8 <= slope <= 1.3,
        slope=slope, r2=r2,
        slopes={k: {"slope": s, "r2": q} for k, (s, q) in study.table.slopes.items()}))

    min_rho = [min(rep.min_rho_history) for rep in study.reports]
    report.add(_trend_entry(
        "positivity", "density stays positive at every iterate",
        min_rho, all(m > 0 for m in min_rho)))

    mass_defect, mean_defect, m_reports, entropy, weak = [], [], [], [], []
    for sol, g, m in zip(study.solutions, geos, meshes):
        params = sol.params
        rho = sol.rho.values
        mass_defect.append(abs(g.cell_measure @ rho - params.M) / params.M)
        mean_defect.append(abs(g.cell_measure @ sol.p.values / g.domain_measure
                               - params.rho_star / params.A))
        system = assemble_mass_balance(m, g, sol.u, rho, params)
        m_reports.append(verify_m_matrix(system))
        entropy.append(audit_entropy(sol, params, m, g)[1])
        weak.append(weak_residuals(sol, g))
    report.add(_trend_entry(
        "mass_constraint", "total mass pinned to the target",
        mass_defect, all(d <= 1e-8 for d in mass_defect), tol=1e-8))
    report.add(_trend_entry(
        "mean_pressure", "mean pressure equals reference density over A",
        mean_defect, all(d <= 1e-8 for d in mean_defect), tol=1e-8))
    report.add(_trend_entry(
        "m_matrix", "mass operator has the sign structure giving positivity",
        [r.offdiag_max for r in m_reports], all(r.ok for r in m_reports),
        details=[{"n": r.n, "diag_min": r.diag_min, "offdiag_max": r.offdiag_max,
                  "colsum_min": r.colsum_min,
                  "inverse_min": r.inverse_min if r.inverse_checked else None}
                 for r in m_reports]))
    report.add(_trend_entry(
        "entropy_balance", entropy[0].anchor,
        [e.values["identity_sum"] for e in entropy],
        all(e.passed for e in entropy),
        tols=[e.values["tol"] for e in entropy]))

    names = [d["name"] for d in weak[0]]
    resids = {name: {"r1": [lvl[i]["r1"] for lvl in weak],
                     "r2": [lvl[i]["r2"] for lvl in weak]}
              for i, name in enumerate(names)}
    report.add(AuditEntry(
        check="weak_residual_decay",
        anchor="weak-form residual pairs decay under refinement",
        values=resids,
        passed=all(_monotone(r["r1"]) and _monotone(r["r2"])
                   for r in resids.values())))
    return report, all_converged


def cmd_verify(cfg):
    mesh, src = load_run_mesh(cfg)
    report, all_converged = run_verification(cfg, mesh, src)
    digest = config_hash(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    meta = _stamp({"command": "verify", "levels": cfg.levels,
                   "mode": cfg.mode, "mesh": src}, cfg)
    report.to_json(os.path.join(cfg.out, "audit.json"),
                   config_hash=digest, meta=meta)
    if cfg.csv:
        report.to_csv(os.path.join(cfg.out, "audit.csv"), config_hash=digest)
    for entry in report.entries:
        print(f"{'PASS' if entry.passed else 'FAIL'} {entry.check}")
    failed = report.failed_checks()
    print(f"verification: {len(report.entries)} checks, {len(failed)} failed")
    if not all_converged:
        return 3
    return 0 if report.passed else 4


# -- argument parsing ------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="crstokes",
        description="Nonconforming finite element / finite volume solver for "
                    "isothermal compressible creeping flow, with its audit suite.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("solve", "run one nonlinear solve and write fields plus a summary"),
            ("study", "run a refinement study and fit convergence rates"),
            ("verify", "run the audit battery on a refinement family"),
            ("mesh-info", "report mesh geometry and regularity")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--mesh", help="mesh source: NXxNY or a mesh file path")
        p.add_argument("--levels", type=int, help="refinement levels")
        p.add_argument("--out", help="output directory (default: current)")
        p.add_argument("--csv", action="store_true",
                       help="also write flattened CSV reports")
        p.add_argument("--no-timestamp", action="store_true",
                       help="omit timestamps and timings for byte-identical reruns")
        p.add_argument("--param", action="append", metavar="KEY=VALUE",
                       help="override one config entry, e.g. params.A=4 or "
                            "controls.tol=1e-10; repeatable")
    return parser


_DISPATCH = {"solve": cmd_solve, "study": cmd_study, "verify": cmd_verify,
             "mesh-info": cmd_mesh_info}


def main(argv=None):
    ns = build_parser().parse_args(argv)
    try:
        cfg = load_config(ns)
        return _DISPATCH[cfg.command](cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RuntimeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
