"""Finite elements on adaptive box meshes for the Poisson wave-front benchmark."""
from .adapt import (AmrConfig, FixedFractionStrategy, ManufacturedSolution, ProblemConfig,
                    amr_loop, compute_local_true_errors, solve_problem,
                    update_refinement_flags)
from .bddc import BddcPreconditioner, bddc_preconditioner
from .fespace import (FeFunction, FeSpace, StrongBoundaryConditions, build_fe_space,
                      interpolate_dirichlet_values, transfer_fe_function,
                      update_hanging_dof_values)
from .integration import DgParameters, integrate_cg, integrate_dg
from .linalg import CholeskyFactor, CsrMatrix, pcg, spmv
from .mesh import (ForestMesh, Partition, create_forest_mesh, create_unit_box_mesh,
                   enforce_2to1_balance, partition_sfc, refine_and_coarsen)

__version__ = "0.1.0"
