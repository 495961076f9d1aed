"""
Particle Swarm Baseline.

Box-constrained particle swarm optimization used as the nonconvex baseline
for the per-step residual minimization, with iteration or wall-clock budgets.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from shiftguard.errors import DimensionMismatchError
from shiftguard.gaussian import as_vector

logger = logging.getLogger(__name__)


class PsoConfig(BaseModel):
    """Swarm hyper-parameters and budget."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    swarm_size: int = Field(default=20, ge=2)
    inertia: float = Field(default=0.729, ge=0.0)
    cognitive: float = Field(default=1.494, ge=0.0)
    social: float = Field(default=1.494, ge=0.0)
    iterations: int = Field(default=10, ge=1)
    time_budget_s: Optional[float] = Field(default=None, gt=0.0)
    lower: Optional[List[float]] = None
    upper: Optional[List[float]] = None
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_bounds(self) -> "PsoConfig":
        if (self.lower is None) != (self.upper is None):
            raise ValueError("lower and upper must be given together")
        if self.lower is not None:
            if len(self.lower) != len(self.upper):
                raise ValueError("lower and upper have different lengths")
            if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
                raise ValueError("lower must be strictly below upper")
        return self


@dataclass
class PsoResult:
    x: np.ndarray
    value: float
    evaluations: int
    iterations: int
    history: List[float] = field(default_factory=list)


def _reflect(x: np.ndarray, v: np.ndarray, lower: np.ndarray, upper: np.ndarray):
    above = x > upper
    below = x < lower
    x = np.where(above, 2.0 * upper - x, x)
    x = np.where(below, 2.0 * lower - x, x)
    v = np.where(above | below, -v, v)
    return np.clip(x, lower, upper), v


def pso_minimize(
    objective: Callable[[np.ndarray], float],
    cfg: PsoConfig,
    lower: Optional[Sequence[float]] = None,
    upper: Optional[Sequence[float]] = None,
    seed: Optional[int] = None,
) -> PsoResult:
    """
    Minimize ``objective`` over the box [lower, upper].

    The initial swarm evaluation is the first iteration, so an iteration budget
    of k spends exactly k * swarm_size evaluations. Positions leaving the box
    are reflected back and their velocity reversed.

    Args:
        objective: Function of a vector, finite on the box
        cfg: Swarm configuration
        lower: Box lower corner (defaults to cfg.lower)
        upper: Box upper corner (defaults to cfg.upper)
        seed: Overrides cfg.seed

    Returns:
        Global best position, value and bookkeeping
    """
    lower = as_vector(lower if lower is not None else cfg.lower, "lower")
    upper = as_vector(upper if upper is not None else cfg.upper, "upper")
    if lower.shape != upper.shape:
        raise DimensionMismatchError("lower and upper bounds have different sizes")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    size, dim = cfg.swarm_size, lower.size
    start = time.perf_counter()

    def evaluate(points: np.ndarray) -> np.ndarray:
        return np.array([float(objective(p)) for p in points])

    x = rng.uniform(lower, upper, size=(size, dim))
    v = np.zeros((size, dim))
    y = evaluate(x)
    evaluations = size
    pbest_x, pbest_y = x.copy(), y.copy()
    best = int(np.argmin(pbest_y))
    gbest_x, gbest_y = pbest_x[best].copy(), float(pbest_y[best])
    history = [gbest_y]
    iterations = 1

    while iterations < cfg.iterations:
        if cfg.time_budget_s is not None and time.perf_counter() - start >= cfg.time_budget_s:
            break
        r1 = rng.uniform(0.0, 1.0, x.shape)
        r2 = rng.uniform(0.0, 1.0, x.shape)
        v = cfg.inertia * v + cfg.cognitive * r1 * (pbest_x - x) + cfg.social * r2 * (gbest_x - x)
        x, v = _reflect(x + v, v, lower, upper)
        y = evaluate(x)
        evaluations += size
        iterations += 1

        improved = y < pbest_y
        pbest_x[improved] = x[improved]
        pbest_y[improved] = y[improved]
        best = int(np.argmin(pbest_y))
        if pbest_y[best] < gbest_y:
            gbest_x, gbest_y = pbest_x[best].copy(), float(pbest_y[best])
        history.append(gbest_y)

    return PsoResult(gbest_x, gbest_y, evaluations, iterations, history)


def pso_adapt_step(
    state,
    target,
    predict: Callable[[np.ndarray, np.ndarray], np.ndarray],
    cfg: PsoConfig,
    lower: Sequence[float],
    upper: Sequence[float],
    seed: Optional[int] = None,
) -> PsoResult:
    """
    Search the action minimizing ||target - predict(state, a)|| with PSO.

    Args:
        state: Current state s_t
        target: Reference next state
        predict: Surrogate (s, a) -> predicted next state
        cfg: Swarm configuration and budget
        lower: Actuator lower bounds
        upper: Actuator upper bounds
        seed: Overrides cfg.seed

    Returns:
        PSO result whose ``x`` is the action
    """
    state = as_vector(state, "state")
    target = as_vector(target, "target")

    def residual(action: np.ndarray) -> float:
        return float(np.linalg.norm(target - predict(state, action)))

    return pso_minimize(residual, cfg, lower, upper, seed)


def calibrate_iterations(
    objective: Callable[[np.ndarray], float],
    cfg: PsoConfig,
    target_seconds: float,
    lower: Optional[Sequence[float]] = None,
    upper: Optional[Sequence[float]] = None,
    probe_iterations: int = 5,
) -> int:
    """Iteration count whose PSO wall time matches ``target_seconds`` on this host."""
    probe = cfg.model_copy(update={"iterations": max(2, probe_iterations), "time_budget_s": None})
    start = time.perf_counter()
    result = pso_minimize(objective, probe, lower, upper)
    per_iteration = (time.perf_counter() - start) / result.iterations
    iterations = max(1, int(round(target_seconds / max(per_iteration, 1e-9))))
    logger.info(f"PSO calibrated to {iterations} iterations ({1000.0 * per_iteration:.3f} ms each)")
    return iterations
