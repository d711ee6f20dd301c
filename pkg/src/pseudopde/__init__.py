"""Monte-Carlo solvers for semilinear parabolic equations driven by possibly singular diffusions.

Forward simulation, generator-based operators, a Picard BSDE solver, the
kernel-identity (mild) formulation of the pair ``(u, v)``, and a finite
difference reference in one dimension.
"""

from .bsde_solver import (BsdeSolution, DriverSpec, PicardConfig, RegressionBasis, TerminalSpec,
                          contraction_diagnostics, picard_solve, solve_markovian)
from .decoupled_mild import (MildSolutionPair, MonteCarloSettings, ResidualReport, SpaceTimeGrid,
                             build_u_from_bsde, evaluate_mild_residuals, martingale_roundtrip,
                             solve_mild_fixed_point)
from .forward_models import (DiffusionModel, DistributionalDriftModel, PathEnsemble, TimeGrid,
                             estimate_kernel, simulate)
from .operators import (GridFunction, PsiSystem, TestFunction, apply_a, carre_du_champ,
                        gamma_psi)
from .pde_reference import FdConfig, closed_form_gaussian, solve_semilinear_fd

__version__ = "0.1.0"
