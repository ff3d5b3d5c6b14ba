"""Constraint-preserving shape optimization of 2D incompressible flow.

The package couples a Taylor-Hood Navier-Stokes solver with discrete
adjoint sensitivities, a p-Laplace descent-direction subproblem with
volume and barycenter constraints, and a grid-hierarchy deformation
driver.
"""

from .mesh import (GridHierarchy, Marker, Mesh, MeshError, ParseError,
                   Polygon, QualityReport, TanglingError, TopologyError,
                   apply_deformation, generate_benchmark_mesh,
                   obstacle_polygon, quality_report, read_msh,
                   refine_uniform, structured_rectangle,
                   symmetric_difference_area, write_vtk)
from .fem import (AssemblyError, DegenerateElementError, FunctionSpace,
                  QuadratureRule, apply_dirichlet, assemble_functional,
                  assemble_operator, eliminate_rows_cols, quadrature_rule)
from .saddle import (InnerSolver, RankDeficiencyError, SaddleError,
                     SaddlePointSystem, build_inner_solver, givens,
                     schur_gmres, schur_product, solve_saddle_direct)
from .descent import (ConstraintValue, DescentError, NewtonInfo,
                      NonconvergenceError, P1Geometry,
                      SingularConfigurationError, assemble_constraint_jacobian,
                      assemble_defect, assemble_hessian, constraint_values,
                      det_expansion_coeffs, lagrangian_value, newton_descent,
                      p_continuation, p_stages, w1p_norm)
from .flow import (AdjointState, FlowError, FlowNonconvergenceError,
                   FlowProblem, FlowState, TaylorHood, benchmark_problem,
                   energy_dissipation, inflow_profile, shape_gradient,
                   solve_adjoint, solve_flow)
from .driver import (ConfigError, OptimConfig, RunLog, StepRecord,
                     parse_config, run_optimize, shape_convergence_report,
                     write_runlog_csv)

__version__ = "0.1.0"
