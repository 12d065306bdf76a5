"""Hosting-capacity assessment for distributed generation on radial feeders.

The package covers the full assessment chain: exact unbalanced power flow
(`sweep`), linear branch-flow models (`lbpf`), deterministic and two-stage
robust capacity optimization (`dccam`, `rccam`), anchored refinement
(`threestep`), and Monte Carlo validation plus the command line (`simcli`).
"""

from .dccam import (AnmOptions, AssessmentResult, UncertaintyRealization,
                    assess_deterministic)
from .lbpf import LinCoeffs, OperatingPoint, build_lbpf2, lbpf1_coeffs, linear_solve
from .milp import ConfigError, MilpModel, SolveParams, SolverError, SolverStatus
from .netmodel import (Instance, ModelError, Network, ParseError, ScenarioData,
                       base_topology, is_radial, load_instance, parse_instance)
from .rccam import CcgOptions, CcgTrace, RobustOutcome, ccg_solve
from .simcli import McResult, compare_methods, monte_carlo, budget_sweep, main
from .sweep import (InjectionSet, PowerFlowState, SweepError, solve,
                    violation_report)
from .threestep import RefinedResult, TruthResult, iterate_truth, three_step

__version__ = "0.1.0"

__all__ = [
    "AnmOptions", "AssessmentResult", "UncertaintyRealization",
    "assess_deterministic",
    "LinCoeffs", "OperatingPoint", "build_lbpf2", "lbpf1_coeffs", "linear_solve",
    "ConfigError", "MilpModel", "SolveParams", "SolverError", "SolverStatus",
    "Instance", "ModelError", "Network", "ParseError", "ScenarioData",
    "base_topology", "is_radial", "load_instance", "parse_instance",
    "CcgOptions", "CcgTrace", "RobustOutcome", "ccg_solve",
    "McResult", "compare_methods", "monte_carlo", "budget_sweep", "main",
    "InjectionSet", "PowerFlowState", "SweepError", "solve", "violation_report",
    "RefinedResult", "TruthResult", "iterate_truth", "three_step",
    "__version__",
]
