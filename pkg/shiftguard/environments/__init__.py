"""
Simulated Environments.

Training/deployment vehicle pairs, their baseline policies and dataset tools.
"""

from shiftguard.environments.base import EnvSpec, Environment, Planner, Policy
from shiftguard.environments.policies import make_pi_star
from shiftguard.environments.sampling import (
    ENV_KINDS,
    ClosedLoopPlanner,
    Dataset,
    collect_transitions,
    make_env,
    sample_reference,
)

__all__ = [
    "ENV_KINDS",
    "ClosedLoopPlanner",
    "Dataset",
    "EnvSpec",
    "Environment",
    "Planner",
    "Policy",
    "collect_transitions",
    "make_env",
    "make_pi_star",
    "sample_reference",
]
