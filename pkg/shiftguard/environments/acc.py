"""
Adaptive Cruise Control.

Simplified longitudinal model of an ego car behind a lead car. The ego
acceleration follows the command through a first-order lag, the lead car
follows a sinusoidal acceleration profile, and a gap rule switches the ego
target speed between the set speed and the lead speed.

Full state: (x_ego, v_ego, a_ego, x_lead, v_lead, t, int_v_err).
Observation: (int_v_err, v_err, v_ego).
"""

import logging
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from shiftguard.environments.base import EnvSpec, Environment

logger = logging.getLogger(__name__)

X_EGO, V_EGO, A_EGO, X_LEAD, V_LEAD, TIME, INT_ERR = range(7)

SIMPLIFIED_MODEL_WARNING = (
    "ACC results use a simplified longitudinal model with a reconstructed gap rule, "
    "not the original signal-processing block"
)


class AccParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    set_speed: float = Field(default=30.0, gt=0.0)
    default_gap: float = Field(default=10.0, ge=0.0)
    time_gap: float = Field(default=1.4, ge=0.0)
    lag: float = Field(default=0.5, gt=0.0)
    lead_amplitude: float = Field(default=0.6, ge=0.0)
    lead_period: float = Field(default=40.0, gt=0.0)
    dt: float = Field(default=0.1, gt=0.0)
    min_accel: float = -3.0
    max_accel: float = 2.0
    ego_speed0: float = 20.0
    lead_gap0: float = 60.0
    lead_speed0: float = 25.0
    noise_std: float = Field(default=0.0, ge=0.0)


TRAIN_PARAMS = AccParams(set_speed=30.0)
DEPLOY_PARAMS = AccParams(set_speed=34.5)


def safe_distance(v_ego: float, params: AccParams) -> float:
    return params.default_gap + params.time_gap * v_ego


def target_speed(d_rel: float, v_ego: float, v_lead: float, params: AccParams) -> float:
    """Set speed when the gap is safe, otherwise the slower of set speed and lead speed."""
    if d_rel >= safe_distance(v_ego, params):
        return params.set_speed
    return min(params.set_speed, v_lead)


def speed_error(state: np.ndarray, params: AccParams) -> float:
    d_rel = state[X_LEAD] - state[X_EGO]
    return target_speed(d_rel, state[V_EGO], state[V_LEAD], params) - state[V_EGO]


def acc_step(state, u, params: AccParams, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Advance the ego and lead cars by one time step.

    Args:
        state: Full state (x_ego, v_ego, a_ego, x_lead, v_lead, t, int_v_err)
        u: Commanded ego acceleration, clipped to [min_accel, max_accel]
        params: Model parameters
        rng: Generator for acceleration noise (noise-free when None or std 0)

    Returns:
        Next full state
    """
    s = np.array(state, dtype=float)
    dt = params.dt
    u = float(np.clip(np.asarray(u, dtype=float).reshape(-1)[0], params.min_accel, params.max_accel))

    a_ego = s[A_EGO] + (u - s[A_EGO]) * dt / params.lag
    if rng is not None and params.noise_std > 0.0:
        a_ego += rng.normal(0.0, params.noise_std)
    v_ego = s[V_EGO] + a_ego * dt
    x_ego = s[X_EGO] + v_ego * dt

    a_lead = params.lead_amplitude * np.sin(2.0 * np.pi * s[TIME] / params.lead_period)
    v_lead = max(0.0, s[V_LEAD] + a_lead * dt)
    x_lead = s[X_LEAD] + v_lead * dt

    nxt = np.array([x_ego, v_ego, a_ego, x_lead, v_lead, s[TIME] + dt, s[INT_ERR]])
    nxt[INT_ERR] += speed_error(nxt, params) * dt
    return nxt


class AccEnv(Environment):
    kind = "acc"

    def __init__(self, params: AccParams, deployment: bool, seed: Optional[int] = None):
        spec = EnvSpec(3, 1, np.array([params.min_accel]), np.array([params.max_accel]), params.dt)
        super().__init__(spec, deployment, seed)
        self.params = params

    def default_state(self) -> np.ndarray:
        p = self.params
        return np.array([0.0, p.ego_speed0, 0.0, p.lead_gap0, p.lead_speed0, 0.0, 0.0])

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([
            0.0,
            rng.uniform(10.0, 36.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(10.0, 120.0),
            rng.uniform(15.0, 35.0),
            rng.uniform(0.0, self.params.lead_period),
            rng.uniform(-20.0, 20.0),
        ])

    def observation(self, state) -> np.ndarray:
        return np.array([state[INT_ERR], speed_error(state, self.params), state[V_EGO]])

    def auxiliary(self, state) -> Dict[str, float]:
        return {
            "d_rel": float(state[X_LEAD] - state[X_EGO]),
            "v_rel": float(state[V_LEAD] - state[V_EGO]),
        }

    def simulate(self, state, action) -> np.ndarray:
        return acc_step(state, action, self.params)

    def transition(self, state, action, rng) -> np.ndarray:
        return acc_step(state, action, self.params, rng)
