"""
Environment Interface.

Common base for the simulated vehicles: a full internal state, an observation
map, a pure noise-at-mean transition used for reference trajectories, and a
stochastic transition driven by the instance's own random generator.
"""

import copy
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Protocol

import numpy as np

from shiftguard.errors import DimensionMismatchError
from shiftguard.gaussian import as_vector


@dataclass(frozen=True, eq=False)
class EnvSpec:
    """Dimensions, actuator box and time step of an environment."""

    state_dim: int
    action_dim: int
    lower: np.ndarray
    upper: np.ndarray
    dt: float


class Policy(Protocol):
    """Maps an observation at step ``t`` to an action."""

    def __call__(self, observation: np.ndarray, t: int) -> np.ndarray:
        ...


class Planner(Protocol):
    """Maps the full state, its observation and step ``t`` to the desired next observation."""

    def __call__(self, state: np.ndarray, observation: np.ndarray, t: int) -> np.ndarray:
        ...


class Environment(ABC):
    """
    Simulated vehicle with its own random generator.

    Subclasses define the full state, ``observation(state)``, the pure
    ``simulate(state, action)`` at noise mean and the stochastic
    ``transition(state, action, rng)``.
    """

    kind: str = "environment"

    def __init__(self, spec: EnvSpec, deployment: bool, seed: Optional[int] = None):
        self.spec = spec
        self.deployment = deployment
        self.rng = np.random.default_rng(seed)
        self._state: Optional[np.ndarray] = None

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    @property
    def action_dim(self) -> int:
        return self.spec.action_dim

    @property
    def lower(self) -> np.ndarray:
        return self.spec.lower

    @property
    def upper(self) -> np.ndarray:
        return self.spec.upper

    @property
    def dt(self) -> float:
        return self.spec.dt

    @property
    def state(self) -> np.ndarray:
        if self._state is None:
            raise RuntimeError(f"{self.kind} environment used before reset")
        return self._state.copy()

    def clip_action(self, action) -> np.ndarray:
        action = as_vector(action, "action")
        if action.size != self.action_dim:
            raise DimensionMismatchError(f"action has {action.size} entries, expected {self.action_dim}")
        return np.clip(action, self.lower, self.upper)

    @abstractmethod
    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        """Draw a full state from the initial-state sampler."""

    @abstractmethod
    def default_state(self) -> np.ndarray:
        """Full state the experiments start from."""

    @abstractmethod
    def simulate(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        """One step with the noise at its mean."""

    @abstractmethod
    def transition(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One stochastic step."""

    def observation(self, state: np.ndarray) -> np.ndarray:
        return np.array(state, dtype=float)

    def auxiliary(self, state: np.ndarray) -> Dict[str, float]:
        return {}

    def reset(self, state=None) -> np.ndarray:
        self._state = self.default_state() if state is None else np.array(state, dtype=float)
        return self.observe()

    def step(self, action) -> np.ndarray:
        self._state = self.transition(self.state, self.clip_action(action), self.rng)
        return self.observe()

    def observe(self) -> np.ndarray:
        return self.observation(self.state)

    def aux(self) -> Dict[str, float]:
        return self.auxiliary(self.state)

    def clone_with_seed(self, seed: Optional[int]) -> "Environment":
        clone = copy.deepcopy(self)
        clone.rng = np.random.default_rng(seed)
        return clone
