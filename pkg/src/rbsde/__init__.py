"""Obliquely reflected BSDE solver with optimal-switching oracles.

The value process of a multidimensional switching problem is
approximated with a discretely reflected backward Euler scheme: at each
date the scheme takes a conditional expectation, solves an implicit
driver fixed point, and projects onto the switching domain at
reflection dates only.  Conditional expectations come from exchangeable
engines (exact binomial lattice, or least-squares Monte Carlo), and the
switched-strategy representation provides independent oracles.
"""

from .condexp import (BasisSpec, LatticeEngine, RegressionEngine, RegressionFit,
                      lattice_cond_exp, lattice_z_bar, regress)
from .config import ConfigError, RunConfig, compile_expression, load_config
from .core import (CostModel, Driver, Problem, SdeModel, Terminal, TimeGrid,
                   ValidationReport, build_uniform_grid, validate_problem)
from .experiments import (ConvergenceTable, EngineCompareReport, OracleCompareReport,
                          build_engine, run_convergence, run_engine_compare,
                          run_oracle_compare, run_single, run_validate)
from .forward import Lattice, PathBundle, build_lattice, dump_paths_csv, simulate_euler
from .projection import is_in_domain, lipschitz_witness, project, project_batch
from .scheme import (ComparisonReport, SchemeSolution, backward_solve,
                     compare_schemes, implicit_step, solution_to_csv,
                     unreflected_backward_solve)
from .switching import (DominationReport, SwitchingStrategy, decision_dates,
                        domination_check, enumerate_strategies_oracle,
                        evaluate_switched, extract_optimal_strategy,
                        random_strategies, strategy_to_csv)

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "LatticeEngine", "RegressionEngine", "RegressionFit",
    "lattice_cond_exp", "lattice_z_bar", "regress",
    "ConfigError", "RunConfig", "compile_expression", "load_config",
    "CostModel", "Driver", "Problem", "SdeModel", "Terminal", "TimeGrid",
    "ValidationReport", "build_uniform_grid", "validate_problem",
    "ConvergenceTable", "EngineCompareReport", "OracleCompareReport",
    "build_engine", "run_convergence", "run_engine_compare",
    "run_oracle_compare", "run_single", "run_validate",
    "Lattice", "PathBundle", "build_lattice", "dump_paths_csv", "simulate_euler",
    "is_in_domain", "lipschitz_witness", "project", "project_batch",
    "ComparisonReport", "SchemeSolution", "backward_solve", "compare_schemes",
    "implicit_step", "solution_to_csv", "unreflected_backward_solve",
    "DominationReport", "SwitchingStrategy", "decision_dates", "domination_check",
    "enumerate_strategies_oracle", "evaluate_switched", "extract_optimal_strategy",
    "random_strategies", "strategy_to_csv",
]
