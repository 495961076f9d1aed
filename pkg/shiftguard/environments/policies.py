"""
Baseline Policies.

Fixed classical controllers tuned on the training environments: a Stanley
path-tracking law for the Dubins car, discrete-time LQR reference tracking
for the linear car and a PI speed controller for adaptive cruise control.
"""

import logging
from typing import Optional

import numpy as np
from scipy import linalg

from shiftguard.environments import acc, dubins, linear_car
from shiftguard.environments.base import Environment

logger = logging.getLogger(__name__)


class StanleyPolicy:
    """phi = atan(l * curvature) + heading error + atan(gain * offset / speed), clipped."""

    def __init__(self, path: dubins.PathSpec, params: dubins.DubinsParams = dubins.TRAIN_PARAMS, gain: float = 1.0):
        self.path = path
        self.params = params
        self.gain = gain

    def __call__(self, observation, t: int = 0) -> np.ndarray:
        x, y, s, c = np.asarray(observation, dtype=float)
        offset, heading_error = self.path.tracking_errors(x, y, float(np.arctan2(s, c)))
        feed_forward = np.arctan(self.params.length * self.path.curvature())
        steering = feed_forward + heading_error + np.arctan(self.gain * offset / self.params.speed)
        limit = self.params.max_steering
        return np.array([float(np.clip(steering, -limit, limit))])


class RampReference:
    """Constant-velocity reference (v t dt, v, 0) for the linear car."""

    def __init__(self, speed: float = 2.0, dt: float = 0.1):
        self.speed = speed
        self.dt = dt

    def __call__(self, t: int) -> np.ndarray:
        return np.array([self.speed * self.dt * t, self.speed, 0.0])


def dlqr(a: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Discrete-time LQR gain K for u = -K x."""
    x = linalg.solve_discrete_are(a, b, q, r)
    return linalg.solve(b.T @ x @ b + r, b.T @ x @ a)


class LqrTrackingPolicy:
    """
    u = u_ff - K (x - r_t), with K from the training (A, B) and u_ff the
    least-squares input carrying r_t to r_{t+1} under the mean training noise.
    """

    def __init__(
        self,
        params: linear_car.LinearCarParams = linear_car.TRAIN_PARAMS,
        reference: Optional[RampReference] = None,
        q_diag=(10.0, 1.0, 0.1),
        r: float = 0.1,
    ):
        self.params = params
        self.a = np.asarray(params.A)
        self.b = np.asarray(params.B)
        self.reference = reference or RampReference(dt=params.dt)
        self.gain = dlqr(self.a, self.b, np.diag(q_diag), np.array([[r]]))

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.a - self.b @ self.gain))))

    def feed_forward(self, t: int) -> np.ndarray:
        drift = self.reference(t + 1) - self.a @ self.reference(t) - np.asarray(self.params.noise_mean)
        return np.linalg.lstsq(self.b, drift, rcond=None)[0]

    def __call__(self, observation, t: int = 0) -> np.ndarray:
        error = np.asarray(observation, dtype=float) - self.reference(t)
        u = self.feed_forward(t) - self.gain @ error
        return np.clip(u, -self.params.action_limit, self.params.action_limit)


class PiCruisePolicy:
    """u = k_p v_err + k_i int(v_err), clipped to the acceleration range."""

    def __init__(self, params: acc.AccParams = acc.TRAIN_PARAMS, kp: float = 0.5, ki: float = 0.05):
        self.params = params
        self.kp = kp
        self.ki = ki

    def __call__(self, observation, t: int = 0) -> np.ndarray:
        integral, error, _ = np.asarray(observation, dtype=float)
        u = self.kp * error + self.ki * integral
        return np.array([float(np.clip(u, self.params.min_accel, self.params.max_accel))])


def make_pi_star(env: Environment):
    """Baseline policy for ``env``'s kind, tuned on the training parameters."""
    if env.kind == "dubins":
        return StanleyPolicy(env.path)
    if env.kind == "linear_car":
        return LqrTrackingPolicy()
    if env.kind == "acc":
        return PiCruisePolicy()
    raise ValueError(f"no baseline policy for environment kind {env.kind!r}")
