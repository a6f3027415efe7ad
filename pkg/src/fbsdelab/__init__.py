"""Numerical laboratory for quadratic-driver backward SDEs and their PDEs.

Three independent solution routes (regression Monte Carlo on the original or
exponentially transformed backward equation, and a finite-difference march of
the quasilinear PDE) are cross-checked against each other and against the
closed-form quadratic value of the unperturbed tracking problem.
"""

from .bsde import (BackwardSolution, BasisSpec, MartingaleResidualReport,
                   martingale_residual, solve_girsanov, solve_lsmc,
                   solve_transformed)
from .control import (ControlPolicy, CostEstimate, PolicyRanking,
                      RiccatiSolution, compare_policies, estimate_cost,
                      solve_riccati)
from .errors import (ConfigError, DomainError, EvaluationError, FbsdeLabError,
                     SimulationError, SolverError)
from .expressions import Expr, ExpressionError, parse_expression
from .harness import (ExperimentResult, Numerics, ProblemSetup, RouteEstimate,
                      Verdict, run_delta_sweep, run_feynman_kac_check,
                      run_uniqueness_check)
from .moduli import (EntropyModulus, LogPowerModulus, ModulusFamily,
                     ProductInequalityReport, SumModulus,
                     dominating_unit_exponent_cutoff, identity_modulus,
                     modulus_for_family, osgood_divergence_probe,
                     product_inequality_check)
from .pde import (GridSolution, SpaceGrid, evolution_operator_residual,
                  extract_feedback, solve_pde)
from .problem import (AssumptionReport, ClauseVerdict, ControlProblemSpec,
                      DriverSpec, ForwardSpec, SampleGrid,
                      check_driver_assumptions, eval_driver,
                      eval_girsanov_driver, girsanov_shifted_driver,
                      parabolicity_constant)
from .sde import PathEnsemble, TimeGrid, controlled_simulate, simulate

__version__ = "0.1.0"

__all__ = [
    "AssumptionReport", "BackwardSolution", "BasisSpec", "ClauseVerdict",
    "ConfigError", "ControlPolicy", "ControlProblemSpec", "CostEstimate",
    "DomainError", "DriverSpec", "EntropyModulus", "EvaluationError",
    "ExperimentResult", "Expr", "ExpressionError", "FbsdeLabError",
    "ForwardSpec", "GridSolution", "LogPowerModulus",
    "MartingaleResidualReport", "ModulusFamily", "Numerics", "PathEnsemble",
    "PolicyRanking", "ProblemSetup", "ProductInequalityReport",
    "RiccatiSolution", "RouteEstimate", "SampleGrid", "SimulationError",
    "SolverError", "SpaceGrid", "SumModulus", "TimeGrid", "Verdict",
    "check_driver_assumptions", "compare_policies", "controlled_simulate",
    "dominating_unit_exponent_cutoff",
    "estimate_cost", "eval_driver", "eval_girsanov_driver",
    "evolution_operator_residual", "extract_feedback",
    "girsanov_shifted_driver", "identity_modulus", "martingale_residual",
    "modulus_for_family", "osgood_divergence_probe", "parabolicity_constant",
    "parse_expression", "product_inequality_check", "run_delta_sweep",
    "run_feynman_kac_check", "run_uniqueness_check", "simulate",
    "solve_girsanov", "solve_lsmc", "solve_pde", "solve_riccati",
    "solve_transformed",
]
