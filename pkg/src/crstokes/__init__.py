"""Edge-mean finite element / upwind finite volume solver for isothermal
compressible creeping flow, with a verification suite covering the
structural properties the discretization is built on."""

from .mesh import (Mesh, MeshError, GeometryTables, MeshQuality,
                   build_structured, read_mesh, refine_uniform,
                   compute_geometry, regularity_theta)
from .cr_space import (DofMap, CRFunction, VelocityField, CellField,
                       build_dofmap, eval_basis, broken_gradient,
                       broken_divergence, broken_h1_seminorm,
                       discrete_rho_seminorm, edge_jump_integrals,
                       interpolate_cr)
from .scheme import (SchemeParams, SparseSystem, assemble_momentum,
                     assemble_mass_balance, edge_velocity_flux,
                     upwind_density, verify_m_matrix, nonlinear_residual)
from .solver import (SolverControls, Solution, SolveReport, solve_mass,
                     solve_momentum, picard_solve, canonical_json)
from .mms import (ManufacturedCase, RateTable, stream_function_case,
                  compute_errors, convergence_study)
from .analysis import (AuditEntry, AuditReport, EntropyBreakdown,
                       check_divergence_preservation, check_interp_rates,
                       check_inequalities, check_log_mean_bracket,
                       translate_norm, infsup_constant,
                       audit_entropy, log_mean, weak_residuals)

__version__ = "0.1.0"
