"""nestkit - nested sampling as a breadth-first search over an exploration tree."""

__version__ = "0.1.0"
__author__ = "nestkit contributors"
__description__ = "Bayesian evidence and posteriors by diagnosable nested sampling"

from .integrator import RunResult, estimate_uncertainty, integrate
from .problems import Problem, get_problem
from .schema import (
    AgentPolicy,
    RunManifest,
    RunSummary,
    ShrinkageEstimator,
    StepSamplerConfig,
    TerminationPolicy,
)
from .tree import ExplorationTree, create_tree, merge_trees, read_tree, write_tree

__all__ = [
    "ExplorationTree",
    "create_tree",
    "merge_trees",
    "read_tree",
    "write_tree",
    "integrate",
    "estimate_uncertainty",
    "RunResult",
    "Problem",
    "get_problem",
    "AgentPolicy",
    "RunManifest",
    "RunSummary",
    "ShrinkageEstimator",
    "StepSamplerConfig",
    "TerminationPolicy",
]
