"""
Episode Step Records.

Defines the per-step record written by the closed-loop runner and the
factory that fills in its defaults.
"""

from typing import Dict, List, Optional, TypedDict


class StepRecord(TypedDict):
    """One step of a closed-loop episode."""

    # Time index and reference state tau_opt(t)
    t: int
    reference: List[float]

    # Observed state s_t and the applied action
    observation: List[float]
    action: List[float]

    # ||tau_opt(t+1) - s_{t+1}|| after the action was applied
    residual_norm: float

    # Certified bound, blank unless the adapted action was computed
    logdet_bound: Optional[float]
    solver_status: str
    solve_ms: float

    # Surrogate residuals of both candidates and which one was applied
    pi_star_residual: Optional[float]
    adapted_residual: Optional[float]
    chosen: str

    # Environment extras after the step (d_rel for ACC)
    aux: Dict[str, float]


def initialize_step_record(t: int, reference, observation) -> StepRecord:
    """
    Initialize a step record before the action is chosen.

    Args:
        t: Step index
        reference: Reference state at t
        observation: Observed state at t

    Returns:
        Record with an empty action and a pi* status
    """
    return {
        "t": int(t),
        "reference": [float(v) for v in reference],
        "observation": [float(v) for v in observation],
        "action": [],
        "residual_norm": float("nan"),
        "logdet_bound": None,
        "solver_status": "pi_star",
        "solve_ms": 0.0,
        "pi_star_residual": None,
        "adapted_residual": None,
        "chosen": "pi_star",
        "aux": {},
    }
