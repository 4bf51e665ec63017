"""End-to-end command line checks through subprocess invocations."""

import json
import os
import shutil
import subprocess
import sys

import pytest


def run_cli(*args, env_extra=None, cwd=None):
    env = os.environ.copy()
    env.setdefault("CRSTOKES_THREADS", "1")
    if env_extra:
        env.update(env_extra)
    return subprocess.run([sys.executable, "-m", "crstokes.cli", *args],
                          capture_output=True, text=True, env=env, cwd=cwd)


@pytest.fixture(scope="module")
def verify_runs(tmp_path_factory):
    """Two identical default verify runs, kept for several assertions."""
    outs = []
    procs = []
    for tag in ("a", "b"):
        out = tmp_path_factory.mktemp(f"verify_{tag}")
        procs.append(run_cli("verify", "--levels", "3", "--no-timestamp",
                             "--csv", "--out", str(out)))
        outs.append(out)
    return procs, outs


# -- mesh-info -------------------------------------------------------

def test_mesh_info_structured(tmp_path):
    proc = run_cli("mesh-info", "--mesh", "2x2", "--out", str(tmp_path))
    assert proc.returncode == 0, proc.stderr
    assert "mesh: structured 2x2 (9 vertices, 8 cells, 16 edges, 8 interior)" \
        in proc.stdout
    assert "theta = 0.414214" in proc.stdout
    assert "violations 0" in proc.stdout
    payload = json.loads((tmp_path / "mesh_info.json").read_text())
    assert payload["command"] == "mesh-info"
    assert len(payload["config_hash"]) == 64
    assert payload["mesh"]["n_cells"] == 8
    assert "timestamp" in payload


def test_mesh_info_from_file(tmp_path):
    mesh_file = tmp_path / "square.crmesh"
    mesh_file.write_text(
        "crmesh 2\n4 2\n0 0\n1 0\n1 1\n0 1\n0 1 2\n0 2 3\n")
    proc = run_cli("mesh-info", "--mesh", str(mesh_file), "--no-timestamp",
                   "--out", str(tmp_path))
    assert proc.returncode == 0, proc.stderr
    payload = json.loads((tmp_path / "mesh_info.json").read_text())
    assert payload["mesh"]["source"] == str(mesh_file)
    assert payload["mesh"]["n_cells"] == 2
    assert "timestamp" not in payload


# -- solve -----------------------------------------------------------

def test_solve_rest_state(tmp_path):
    proc = run_cli("solve", "--mesh", "4x4", "--out", str(tmp_path))
    assert proc.returncode == 0, proc.stderr
    assert "solve converged" in proc.stdout
    assert "min rho" in proc.stdout
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["converged"] is True
    assert summary["iterations"] <= 2
    # rest state recovers rho = rho_star up to sparse-solver roundoff
    assert summary["min_rho"] == pytest.approx(1.0, abs=1e-12)
    assert summary["integrals"]["total_mass"] == pytest.approx(1.0, abs=1e-13)
    assert "wall_time" in summary
    digest = summary["config_hash"]
    for name in ("u_edge.csv", "p_cell.csv", "rho_cell.csv"):
        text = (tmp_path / name).read_text()
        assert text.rstrip().endswith(f"# config_hash={digest}")


def test_solve_rerun_is_byte_identical(tmp_path):
    outs = []
    for tag in ("one", "two"):
        out = tmp_path / tag
        proc = run_cli("solve", "--mesh", "4x4", "--no-timestamp",
                       "--param", "mode=1", "--out", str(out))
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    for name in ("summary.json", "u_edge.csv", "p_cell.csv", "rho_cell.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    summary = json.loads((outs[0] / "summary.json").read_text())
    assert "wall_time" not in summary
    assert "timestamp" not in summary
    assert summary["mode"] == 1


def test_solve_param_precedence(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"mesh": "2x2", "params": {"A": 2.0}}))
    proc = run_cli("solve", "--config", str(config),
                   "--param", "params.A=4", "--out", str(tmp_path))
    assert proc.returncode == 0, proc.stderr
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["params"]["A"] == 4.0
    # mean pressure follows the overridden pressure law
    assert summary["integrals"]["mean_pressure"] == pytest.approx(0.25, abs=1e-12)


def test_solve_nonconvergence_exit_code(tmp_path):
    proc = run_cli("solve", "--mesh", "4x4", "--param", "mode=1",
                   "--param", "controls.max_iter=1",
                   "--param", "controls.tol=1e-14", "--out", str(tmp_path))
    assert proc.returncode == 3
    assert "did not converge" in proc.stdout
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["converged"] is False


# -- study -----------------------------------------------------------

def test_study_runs_and_threads_do_not_change_results(tmp_path):
    outs = []
    for tag, threads in (("t1", "1"), ("t3", "3")):
        out = tmp_path / tag
        proc = run_cli("study", "--mesh", "2x2", "--levels", "3",
                       "--no-timestamp", "--out", str(out),
                       env_extra={"CRSTOKES_THREADS": threads})
        assert proc.returncode == 0, proc.stderr
        assert "err_u_h1b: slope" in proc.stdout
        outs.append(out)
    assert (outs[0] / "study.json").read_bytes() == (outs[1] / "study.json").read_bytes()
    assert (outs[0] / "rates.csv").read_bytes() == (outs[1] / "rates.csv").read_bytes()
    payload = json.loads((outs[0] / "study.json").read_text())
    assert payload["all_converged"] is True
    assert payload["levels"] == 3
    assert len(payload["rows"]) == 3
    lines = (outs[0] / "rates.csv").read_text().splitlines()
    assert lines[0] == "level,h,err_u_h1b,err_u_l2,err_p_l2"
    assert lines[-1] == f"# config_hash={payload['config_hash']}"


def test_study_rejects_bad_thread_budget(tmp_path):
    proc = run_cli("study", "--mesh", "2x2", "--levels", "3",
                   "--out", str(tmp_path),
                   env_extra={"CRSTOKES_THREADS": "zero"})
    assert proc.returncode == 2
    assert "CRSTOKES_THREADS" in proc.stderr


# -- verify ----------------------------------------------------------

def test_verify_passes_with_default_family(verify_runs):
    (proc, _), (out, _) = verify_runs
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) == 17
    assert all(ln.startswith("PASS") for ln in lines)
    assert "verification: 17 checks, 0 failed" in proc.stdout
    payload = json.loads((out / "audit.json").read_text())
    assert payload["command"] == "verify"
    assert len(payload["checks"]) == 17
    checks = {c["check"] for c in payload["checks"]}
    assert {"mesh_regularity", "divergence_preservation", "interpolation_rates",
            "jump_control", "trace_inequality", "mean_deviation",
            "jump_pairing", "translate_estimate", "infsup",
            "log_mean_bracket", "scheme_convergence", "positivity",
            "mass_constraint", "mean_pressure", "m_matrix",
            "entropy_balance", "weak_residual_decay"} == checks
    csv_lines = (out / "audit.csv").read_text().splitlines()
    assert csv_lines[0] == "check,level,value,pass"
    assert csv_lines[-1] == f"# config_hash={payload['config_hash']}"


def test_verify_rerun_is_byte_identical(verify_runs):
    procs, outs = verify_runs
    assert procs[1].returncode == 0
    assert (outs[0] / "audit.json").read_bytes() == (outs[1] / "audit.json").read_bytes()


def test_verify_needs_three_levels(tmp_path):
    proc = run_cli("verify", "--levels", "2", "--out", str(tmp_path))
    assert proc.returncode == 2
    assert "at least 3 levels" in proc.stderr


# -- configuration errors --------------------------------------------

def test_unknown_config_keys(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"mesh": "2x2", "solver": "direct"}))
    proc = run_cli("solve", "--config", str(config), "--out", str(tmp_path))
    assert proc.returncode == 2
    assert "unknown config key 'solver'" in proc.stderr

    config.write_text(json.dumps({"controls": {"tolerance": 1e-8}}))
    proc = run_cli("solve", "--config", str(config), "--out", str(tmp_path))
    assert proc.returncode == 2
    assert "unknown controls key 'tolerance'" in proc.stderr


def test_malformed_json_reports_position(tmp_path):
    config = tmp_path / "broken.json"
    config.write_text('{\n  "mesh": "2x2",\n}\n')
    proc = run_cli("solve", "--config", str(config), "--out", str(tmp_path))
    assert proc.returncode == 2
    assert "broken.json:3:1:" in proc.stderr


def test_missing_files(tmp_path):
    proc = run_cli("solve", "--config", str(tmp_path / "none.json"))
    assert proc.returncode == 2
    assert "no such config file" in proc.stderr
    proc = run_cli("solve", "--mesh", str(tmp_path / "none.crmesh"))
    assert proc.returncode == 2
    assert "no such mesh file" in proc.stderr


def test_bad_values_rejected(tmp_path):
    proc = run_cli("solve", "--param", "controls.omega=3", "--out", str(tmp_path))
    assert proc.returncode == 2
    assert "damping factor" in proc.stderr
    proc = run_cli("solve", "--param", "mode=7", "--out", str(tmp_path))
    assert proc.returncode == 2
    assert "mode must be one of 0..3" in proc.stderr
    proc = run_cli("solve", "--param", "badness", "--out", str(tmp_path))
    assert proc.returncode == 2
    assert "key=value" in proc.stderr
    proc = run_cli("solve", "--param", "params.A=-1", "--out", str(tmp_path))
    assert proc.returncode == 2
    assert "must be positive" in proc.stderr


def test_bad_mesh_file_rejected(tmp_path):
    bad = tmp_path / "broken.crmesh"
    bad.write_text("crmesh 2\n3 1\n0 0\n1 0\n0 1\n0 2 1\n")
    proc = run_cli("mesh-info", "--mesh", str(bad), "--out", str(tmp_path))
    assert proc.returncode == 2
    assert "broken.crmesh" in proc.stderr


# -- console entry point ---------------------------------------------

def test_console_script_installed(tmp_path):
    exe = shutil.which("crstokes")
    if exe is None:
        pytest.skip("console script not on PATH")
    proc = subprocess.run([exe, "mesh-info", "--mesh", "1x1",
                           "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "theta = 0.414214" in proc.stdout
