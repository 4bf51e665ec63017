"""Discrete operators: momentum form, upwind mass balance, sign structure."""

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from crstokes.cr_space import (CellField, VelocityField, broken_divergence,
                               broken_h1_seminorm, build_dofmap)
from crstokes.mesh import build_structured, compute_geometry
from crstokes.scheme import (SchemeParams, SparseSystem, assemble_mass_balance,
                             assemble_momentum, edge_velocity_flux,
                             free_vector, interior_flux, mass_row_values,
                             nonlinear_residual, upwind_density,
                             velocity_from_free, verify_m_matrix)

SQRT2 = np.sqrt(2.0)


@pytest.fixture(scope="module")
def setup22():
    mesh = build_structured(2, 2)
    geo = compute_geometry(mesh)
    return mesh, geo, build_dofmap(mesh)


# -- parameters ------------------------------------------------------

def test_params_validation():
    with pytest.raises(ValueError, match="positive"):
        SchemeParams(A=0.0)
    with pytest.raises(ValueError, match="positive"):
        SchemeParams(M=-1.0)
    with pytest.raises(ValueError, match="strict=False"):
        SchemeParams(alpha=0.5)
    with pytest.raises(ValueError, match="strict=False"):
        SchemeParams(beta=2.0)
    with pytest.warns(UserWarning, match="alpha"):
        SchemeParams(alpha=0.5, strict=False)
    p = SchemeParams(A=2.0, M=3.0, domain_measure=1.5)
    assert p.rho_star == pytest.approx(2.0, abs=1e-15)
    assert set(p.as_dict()) == {"A", "M", "alpha", "beta", "domain_measure",
                                "rho_star"}


def test_params_from_geometry():
    mesh = build_structured(2, 1, rect=(0.0, 0.0, 2.0, 1.0))
    geo = compute_geometry(mesh)
    p = SchemeParams.from_geometry(geo, M=4.0)
    assert p.domain_measure == pytest.approx(2.0, abs=1e-14)
    assert p.rho_star == pytest.approx(2.0, abs=1e-14)


# -- packing ---------------------------------------------------------

def test_free_vector_round_trip(setup22):
    mesh, _, dm = setup22
    rng = np.random.default_rng(11)
    vec = rng.standard_normal(dm.n_free)
    u = velocity_from_free(vec, dm)
    assert np.array_equal(free_vector(u, dm), vec)
    assert np.all(u.values[mesh.boundary_edges] == 0.0)


# -- momentum --------------------------------------------------------

def test_momentum_matrix_structure(setup22):
    mesh, geo, dm = setup22
    A_mat, B_mat, b = assemble_momentum(mesh, geo, dm)
    n = dm.n_free_scalar
    assert A_mat.shape == (2 * n, 2 * n)
    assert B_mat.shape == (mesh.n_cells, 2 * n)
    sym = A_mat - A_mat.T
    assert abs(sym).max() < 1e-14
    # components decouple
    assert A_mat[:n, n:].nnz == 0
    eigs = np.linalg.eigvalsh(A_mat.toarray())
    assert eigs.min() > 1e-3
    assert np.all(b == 0.0)


def test_momentum_energy_identity(setup22):
    mesh, geo, dm = setup22
    A_mat, _, _ = assemble_momentum(mesh, geo, dm)
    rng = np.random.default_rng(5)
    vec = rng.standard_normal(dm.n_free)
    u = velocity_from_free(vec, dm)
    assert vec @ (A_mat @ vec) == pytest.approx(
        broken_h1_seminorm(u, geo) ** 2, rel=1e-13)


def test_divergence_coupling_identity(setup22):
    mesh, geo, dm = setup22
    _, B_mat, _ = assemble_momentum(mesh, geo, dm)
    rng = np.random.default_rng(6)
    vec = rng.standard_normal(dm.n_free)
    q = rng.standard_normal(mesh.n_cells)
    u = velocity_from_free(vec, dm)
    div = broken_divergence(u).values
    assert q @ (B_mat @ vec) == pytest.approx(
        np.sum(q * geo.cell_measure * div), rel=1e-13)
    # constant q is orthogonal to every zero-trace divergence image
    assert np.abs(B_mat.T @ np.ones(mesh.n_cells)).max() < 1e-13


def test_momentum_load_constant_forcing(setup22):
    mesh, geo, dm = setup22
    f = lambda x: np.tile([2.0, -1.0], (len(x), 1))
    _, _, b = assemble_momentum(mesh, geo, dm, f=f)
    n = dm.n_free_scalar
    # int of an edge shape function over one incident cell is |K| / 3;
    # every interior edge of this grid touches two cells of measure 1/8
    expect = 2.0 * (0.125 + 0.125) / 3.0
    assert np.allclose(b[:n], expect, atol=1e-14)
    assert np.allclose(b[n:], -0.5 * expect, atol=1e-14)


def test_momentum_validation(setup22):
    mesh, geo, dm = setup22
    with pytest.raises(ValueError, match="degree"):
        assemble_momentum(mesh, geo, dm, quad_degree=0)
    bad = lambda x: np.full((len(x), 2), np.nan)
    with pytest.raises(ValueError, match="non-finite"):
        assemble_momentum(mesh, geo, dm, f=bad)


# -- fluxes ----------------------------------------------------------

def test_flux_divergence_theorem(setup22):
    mesh, geo, dm = setup22
    rng = np.random.default_rng(8)
    u = velocity_from_free(rng.standard_normal(dm.n_free), dm)
    div = broken_divergence(u).values
    total = np.zeros(mesh.n_cells)
    for r, e in enumerate(mesh.interior_edges):
        K, L = mesh.edge_cells[e]
        total[K] += edge_velocity_flux(u, mesh, geo, e, K)
        total[L] += edge_velocity_flux(u, mesh, geo, e, L)
    # boundary edges carry zero mean, so interior fluxes close the balance
    assert np.allclose(total, geo.cell_measure * div, atol=1e-13)


def test_flux_antisymmetry_and_errors(setup22):
    mesh, geo, dm = setup22
    rng = np.random.default_rng(9)
    u = velocity_from_free(rng.standard_normal(dm.n_free), dm)
    e = mesh.interior_edges[2]
    K, L = mesh.edge_cells[e]
    fK = edge_velocity_flux(u, mesh, geo, e, K)
    fL = edge_velocity_flux(u, mesh, geo, e, L)
    assert fK == pytest.approx(-fL, abs=1e-15)
    assert fK == pytest.approx(interior_flux(u, mesh, geo)[2], abs=1e-15)
    with pytest.raises(ValueError, match="boundary"):
        edge_velocity_flux(u, mesh, geo, mesh.boundary_edges[0], 0)
    far = [c for c in range(mesh.n_cells) if c not in (K, L)][0]
    with pytest.raises(ValueError, match="not incident"):
        edge_velocity_flux(u, mesh, geo, e, far)


def test_upwind_tie_takes_first():
    rho_K = np.array([1.0, 2.0, 3.0])
    rho_L = np.array([4.0, 5.0, 6.0])
    flux = np.array([1.0, 0.0, -1.0])
    assert np.array_equal(upwind_density(rho_K, rho_L, flux), [1.0, 2.0, 6.0])


# -- mass balance ----------------------------------------------------

def test_mass_matrix_single_diagonal_by_hand():
    # 1x1 grid: two cells, one interior edge of length sqrt(2); push a
    # flux of 0.3 out of the first incident cell and freeze rho_prev = 1
    mesh = build_structured(1, 1)
    geo = compute_geometry(mesh)
    dm = build_dofmap(mesh)
    (e,) = mesh.interior_edges
    K, L = mesh.edge_cells[e]
    values = np.zeros((mesh.n_edges, 2))
    values[e] = (0.3 / SQRT2) * geo.unit_normal[e]
    u = VelocityField(mesh, values)
    assert edge_velocity_flux(u, mesh, geo, e, K) == pytest.approx(0.3, abs=1e-15)

    params = SchemeParams(alpha=1.0, beta=1.0)
    system = assemble_mass_balance(mesh, geo, u, np.ones(2), params)

    # anchor h |K| = sqrt(2)/2; penalty (h_K + h_L) |sigma|/h_sigma |2| = 4 sqrt(2)
    anchor = SQRT2 / 2.0
    pen = 4.0 * SQRT2
    expect = np.empty((2, 2))
    expect[K, K] = anchor + 0.3 + pen
    expect[K, L] = -pen
    expect[L, K] = -(0.3 + pen)
    expect[L, L] = anchor + pen
    assert np.allclose(system.matrix.toarray(), expect, atol=1e-14)
    assert np.allclose(system.rhs, anchor * 1.0, atol=1e-15)
    # columns sum to the anchor: what flows out of one cell flows into the other
    assert np.allclose(np.asarray(system.matrix.sum(axis=0)).ravel(),
                       anchor, atol=1e-14)

    rho = np.linalg.solve(expect, system.rhs)
    assert np.all(rho > 0.0)
    # the anchor weighting makes the total mass exact
    assert geo.cell_measure @ rho == pytest.approx(params.M, abs=1e-14)
    # upwind cell K sheds density downstream
    assert rho[K] < 1.0 < rho[L]
    assert rho[K] == pytest.approx(0.97565096195518708, abs=1e-14)


def test_mass_balance_rest_state(setup22):
    mesh, geo, dm = setup22
    params = SchemeParams(A=2.0, M=3.0)
    u = velocity_from_free(np.zeros(dm.n_free), dm)
    system = assemble_mass_balance(mesh, geo, u, np.full(mesh.n_cells, 3.0), params)
    rho = spla.spsolve(system.matrix.tocsc(), system.rhs)
    assert np.allclose(rho, params.rho_star, atol=1e-13)
    rows = mass_row_values(u, rho, params, mesh, geo)
    assert np.abs(rows).max() < 1e-13


def test_mass_balance_validation(setup22):
    mesh, geo, dm = setup22
    params = SchemeParams()
    u = velocity_from_free(np.zeros(dm.n_free), dm)
    with pytest.raises(TypeError, match="VelocityField"):
        assemble_mass_balance(mesh, geo, np.zeros(dm.n_free), np.ones(8), params)
    bad = u.copy()
    bad.values[mesh.interior_edges[0]] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        assemble_mass_balance(mesh, geo, bad, np.ones(mesh.n_cells), params)
    with pytest.raises(ValueError, match="balance to zero"):
        assemble_mass_balance(mesh, geo, u, np.ones(mesh.n_cells), params,
                              g=np.ones(mesh.n_cells))


def test_mass_rows_vanish_at_fixed_point(setup22):
    # re-assembling with rho_prev = rho makes the frozen weight exact, so
    # the linear solution of that system solves the nonlinear rows too
    mesh, geo, dm = setup22
    rng = np.random.default_rng(12)
    u = velocity_from_free(0.4 * rng.standard_normal(dm.n_free), dm)
    params = SchemeParams()
    rho = np.full(mesh.n_cells, params.rho_star)
    for _ in range(60):
        system = assemble_mass_balance(mesh, geo, u, rho, params)
        rho = spla.spsolve(system.matrix.tocsc(), system.rhs)
    rows = mass_row_values(u, CellField(mesh, rho), params, mesh, geo)
    assert np.abs(rows).max() < 1e-12
    assert np.all(rho > 0.0)
    assert geo.cell_measure @ rho == pytest.approx(params.M, abs=1e-13)


def test_balanced_source_shifts_density(setup22):
    mesh, geo, dm = setup22
    params = SchemeParams()
    u = velocity_from_free(np.zeros(dm.n_free), dm)
    g = np.zeros(mesh.n_cells)
    g[0], g[1] = 1e-3, -1e-3
    system = assemble_mass_balance(mesh, geo, u, np.ones(mesh.n_cells), params, g=g)
    rho = spla.spsolve(system.matrix.tocsc(), system.rhs)
    assert not np.allclose(rho, params.rho_star)
    # a balanced source moves mass around without creating any
    assert geo.cell_measure @ rho == pytest.approx(params.M, abs=1e-13)
    rows = mass_row_values(u, rho, params, mesh, geo, g=g)
    system2 = assemble_mass_balance(mesh, geo, u, rho, params, g=g)
    rho2 = spla.spsolve(system2.matrix.tocsc(), system2.rhs)
    rows2 = mass_row_values(u, rho2, params, mesh, geo, g=g)
    assert np.abs(rows2).max() <= np.abs(rows).max() + 1e-15


# -- sign structure --------------------------------------------------

def test_m_matrix_report_on_assembled_system(setup22):
    mesh, geo, dm = setup22
    rng = np.random.default_rng(13)
    u = velocity_from_free(rng.standard_normal(dm.n_free), dm)
    params = SchemeParams()
    rho_prev = 1.0 + 0.5 * rng.random(mesh.n_cells)
    system = assemble_mass_balance(mesh, geo, u, rho_prev, params)
    report = verify_m_matrix(system)
    assert report.sign_ok and report.ok
    assert report.inverse_checked  # 8 cells, below the dense threshold
    assert report.inverse_min is not None and report.inverse_min >= -1e-15
    assert report.diag_min > 0.0
    assert report.offdiag_max <= 0.0
    assert report.colsum_min > 0.0
    assert report.notes == []


def test_m_matrix_report_flags_bad_signs():
    import scipy.sparse as sp
    bad = sp.csr_matrix(np.array([[1.0, 0.5], [-0.2, 1.0]]))
    report = verify_m_matrix(SparseSystem(matrix=bad, rhs=np.zeros(2)))
    assert not report.sign_ok and not report.ok
    assert any("off-diagonal" in n for n in report.notes)
    neg = sp.csr_matrix(np.array([[-1.0, 0.0], [0.0, 1.0]]))
    report = verify_m_matrix(SparseSystem(matrix=neg, rhs=np.zeros(2)))
    assert any("diagonal" in n for n in report.notes)


def test_m_matrix_dense_threshold():
    import scipy.sparse as sp
    big = sp.identity(300, format="csr")
    report = verify_m_matrix(SparseSystem(matrix=big, rhs=np.zeros(300)))
    assert report.sign_ok and not report.inverse_checked
    assert report.inverse_min is None


# -- coupled residual ------------------------------------------------

def test_nonlinear_residual_at_rest_state(setup22):
    # u = 0 with constant density rho_star solves the coupled equations
    # exactly when f = 0: all three defects sit at machine precision
    mesh, geo, dm = setup22
    params = SchemeParams(A=2.0, M=2.0)
    u = velocity_from_free(np.zeros(dm.n_free), dm)
    p = CellField(mesh, np.full(mesh.n_cells, params.rho_star / params.A))
    trip = nonlinear_residual(u, p, params, None, mesh, geo, dm)
    assert trip.momentum < 1e-13
    assert trip.mass < 1e-13
    assert trip.mass_constraint < 1e-13
    d = trip.as_dict()
    assert set(d) == {"momentum", "mass", "mass_constraint"}


def test_nonlinear_residual_accepts_preassembled(setup22):
    mesh, geo, dm = setup22
    params = SchemeParams()
    f = lambda x: np.stack([np.sin(x[:, 0]), np.cos(x[:, 1])], axis=1)
    momentum = assemble_momentum(mesh, geo, dm, f=f)
    rng = np.random.default_rng(14)
    u = velocity_from_free(rng.standard_normal(dm.n_free), dm)
    p = CellField(mesh, 1.0 + 0.1 * rng.random(mesh.n_cells))
    a = nonlinear_residual(u, p, params, f, mesh, geo, dm)
    b = nonlinear_residual(u, p, params, f, mesh, geo, dm, momentum=momentum)
    assert a.momentum == pytest.approx(b.momentum, rel=1e-15)
    assert a.mass == b.mass
