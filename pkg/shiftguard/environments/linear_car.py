"""
Linear Car.

Stochastic discrete-time model of a car's (position, velocity, acceleration)
with an affine-Gaussian update; training and deployment differ in (A, B) and
in the noise mean.
"""

from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from shiftguard.environments.base import EnvSpec, Environment


class LinearCarParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    A: List[List[float]]
    B: List[List[float]]
    noise_mean: List[float]
    noise_variance: float = Field(default=float(np.exp(-8.0)), ge=0.0)
    dt: float = Field(default=0.1, gt=0.0)
    action_limit: float = Field(default=3.0, gt=0.0)


TRAIN_PARAMS = LinearCarParams(
    A=[[1.0, 0.1, 0.0047], [0.0, 1.0, 0.0906], [0.0, 0.0, 0.8187]],
    B=[[0.003], [0.0094], [0.1813]],
    noise_mean=[0.0, 0.0, 0.2],
)

DEPLOY_PARAMS = LinearCarParams(
    A=[[1.0, 0.1, 0.0046], [0.0, 1.0, 0.0885], [0.0, 0.0, 0.7788]],
    B=[[0.004], [0.0115], [0.2212]],
    noise_mean=[0.0, 0.0, 0.0],
)


def linear_step(state, u, params: LinearCarParams, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    x' = A x + B u + noise, with u clipped to the actuator range.

    The noise sits at its mean when ``rng`` is None.
    """
    a = np.asarray(params.A)
    b = np.asarray(params.B)
    u = np.clip(np.asarray(u, dtype=float).reshape(-1), -params.action_limit, params.action_limit)
    noise = np.asarray(params.noise_mean, dtype=float)
    if rng is not None and params.noise_variance > 0.0:
        noise = noise + rng.normal(0.0, np.sqrt(params.noise_variance), size=noise.size)
    return a @ np.asarray(state, dtype=float) + b @ u + noise


class LinearCarEnv(Environment):
    kind = "linear_car"

    def __init__(self, params: LinearCarParams, deployment: bool, seed: Optional[int] = None):
        limit = params.action_limit
        spec = EnvSpec(3, 1, np.array([-limit]), np.array([limit]), params.dt)
        super().__init__(spec, deployment, seed)
        self.params = params

    def default_state(self) -> np.ndarray:
        return np.zeros(3)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-1.0, 25.0), rng.uniform(-1.0, 4.0), rng.uniform(-2.0, 2.0)])

    def simulate(self, state, action) -> np.ndarray:
        return linear_step(state, action, self.params)

    def transition(self, state, action, rng) -> np.ndarray:
        return linear_step(state, action, self.params, rng)
