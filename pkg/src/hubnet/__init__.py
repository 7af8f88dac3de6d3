"""Pricing and subsidy design for mobility hub platforms.

A perturbed-utility route choice QP assigns traveler flows at given MOD
prices; the platform sets those prices (or subsidies) through a penalized
single-level reformulation solved iteratively, checked at small scale by a
brute-force oracle.
"""

from .bilevel import (
    BilevelSolution,
    HyperParams,
    SubsidyScheme,
    compute_gap,
    solve_bilevel,
    value_of_hub,
)
from .lower import (
    LowerSolution,
    assemble_lower_qp,
    capacity_sensitivity,
    kkt_residuals,
    lower_solve,
    platform_metrics,
    solve_lower,
)
from .network import (
    Network,
    NetworkError,
    build_network,
    generate_lirr_synthetic,
    generate_toy,
    load,
    remove_hub,
    save,
    validate,
)
from .oracle import enumerate_active_sets, grid_oracle
from .penalty import assemble_single_level, evaluate, solve_penalized
from .scenarios import ScenarioConfig, ScenarioReport, compare_scenarios, run_scenario
from .svg import emit_svg_map

__version__ = "0.1.0"

__all__ = [
    "BilevelSolution",
    "HyperParams",
    "LowerSolution",
    "Network",
    "NetworkError",
    "ScenarioConfig",
    "ScenarioReport",
    "SubsidyScheme",
    "assemble_lower_qp",
    "assemble_single_level",
    "build_network",
    "capacity_sensitivity",
    "compare_scenarios",
    "compute_gap",
    "emit_svg_map",
    "enumerate_active_sets",
    "evaluate",
    "generate_lirr_synthetic",
    "generate_toy",
    "grid_oracle",
    "kkt_residuals",
    "load",
    "lower_solve",
    "platform_metrics",
    "remove_hub",
    "run_scenario",
    "save",
    "solve_bilevel",
    "solve_lower",
    "solve_penalized",
    "validate",
    "value_of_hub",
]
