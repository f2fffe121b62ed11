"""Mean field games driven by controlled Levy-Khintchine generators and their first-order limit."""

from detlimit.errors import NumericalError, ValidationError
from detlimit.measures import (EmpiricalMeasure, FlowOfProbabilities, PathMeasure, path_w2, pushforward_at,
                               second_moment, sup_w2, wasserstein2)
from detlimit.generator import ControlSet, GeneratorSpec, JumpAtom, TestFunction, apply_generator, epsilon_estimate
from detlimit.dynamics import integrate_batch, integrate_characteristic, reachable_cloud
from detlimit.simulator import SimConfig, simulate, martingale_residual
from detlimit.value import GridConfig, solve_deterministic_value, solve_stochastic_value, check_deviation
from detlimit.equilibrium import (SolverConfig, EquilibriumSolution, solve_minimax_mfg, solve_stochastic_mfg,
                                  verify_minimax, verify_probabilistic)
from detlimit.scenario import Scenario, build_scenario, load_scenario, reference_scenario
from detlimit.study import ConvergenceReport, run_bounds_audit, run_convergence_study
from detlimit.cli import cli_dispatch

__version__ = "0.1.0"
