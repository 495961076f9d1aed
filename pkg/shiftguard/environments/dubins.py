"""
Dubins Car.

Constant-speed car of length l steered by the front-wheel angle, with the
heading carried as (sin theta, cos theta) and integrated by forward Euler.
"""

import logging
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from shiftguard.environments.base import EnvSpec, Environment

logger = logging.getLogger(__name__)


class DubinsParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    length: float = Field(default=2.5, gt=0.0)
    speed: float = Field(default=4.9, gt=0.0)
    dt: float = Field(default=0.01, gt=0.0)
    max_steering: float = Field(default=0.6, gt=0.0)
    noise_std: float = Field(default=0.0, ge=0.0)


TRAIN_PARAMS = DubinsParams(length=2.5, speed=4.9)
DEPLOY_PARAMS = DubinsParams(length=2.1, speed=5.1)


class PathSpec(BaseModel):
    """Reference path: the x axis, or a counter-clockwise circle of ``radius`` centred at (0, radius)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["line", "circle"] = "circle"
    radius: float = Field(default=12.0, gt=0.0)

    def curvature(self) -> float:
        return 0.0 if self.kind == "line" else 1.0 / self.radius

    def tracking_errors(self, x: float, y: float, heading: float):
        """Signed distance to the path on the car's left, and path heading minus car heading."""
        if self.kind == "line":
            offset, path_heading = -y, 0.0
        else:
            dx, dy = x, y - self.radius
            offset = float(np.hypot(dx, dy)) - self.radius
            path_heading = float(np.arctan2(dy, dx)) + 0.5 * np.pi
        heading_error = float(np.arctan2(np.sin(path_heading - heading), np.cos(path_heading - heading)))
        return offset, heading_error


def dubins_step(state, steering: float, params: DubinsParams, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Forward-Euler step of (x, y, sin theta, cos theta) followed by renormalization.

    Args:
        state: (x, y, sin theta, cos theta)
        steering: Front-wheel angle phi in radians
        params: Car length, speed and time step
        rng: Generator for additive Gaussian noise (noise-free when None or std 0)

    Returns:
        Next state
    """
    x, y, s, c = np.asarray(state, dtype=float)
    phi = float(np.clip(steering, -params.max_steering, params.max_steering))
    turn = params.speed / params.length * np.tan(phi)
    nxt = np.array([
        x + params.speed * c * params.dt,
        y + params.speed * s * params.dt,
        s + turn * c * params.dt,
        c - turn * s * params.dt,
    ])
    if rng is not None and params.noise_std > 0.0:
        nxt = nxt + rng.normal(0.0, params.noise_std, size=4)
    norm = np.hypot(nxt[2], nxt[3])
    nxt[2:] = nxt[2:] / norm
    return nxt


class DubinsEnv(Environment):
    kind = "dubins"

    def __init__(
        self,
        params: DubinsParams,
        deployment: bool,
        seed: Optional[int] = None,
        path: Optional[PathSpec] = None,
    ):
        spec = EnvSpec(4, 1, np.array([-params.max_steering]), np.array([params.max_steering]), params.dt)
        super().__init__(spec, deployment, seed)
        self.params = params
        self.path = path or PathSpec()

    def default_state(self) -> np.ndarray:
        return np.array([0.0, 0.0, 0.0, 1.0])

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        """A point near the reference path with a perturbed heading."""
        if self.path.kind == "line":
            x, y, heading = rng.uniform(-5.0, 30.0), 0.0, 0.0
        else:
            angle = rng.uniform(-np.pi, np.pi)
            x = self.path.radius * np.cos(angle)
            y = self.path.radius + self.path.radius * np.sin(angle)
            heading = angle + 0.5 * np.pi
        heading += rng.uniform(-0.3, 0.3)
        offset = rng.uniform(-1.0, 1.0)
        return np.array([x - offset * np.sin(heading), y + offset * np.cos(heading), np.sin(heading), np.cos(heading)])

    def simulate(self, state, action) -> np.ndarray:
        return dubins_step(state, float(np.asarray(action).reshape(-1)[0]), self.params)

    def transition(self, state, action, rng) -> np.ndarray:
        return dubins_step(state, float(np.asarray(action).reshape(-1)[0]), self.params, rng)
