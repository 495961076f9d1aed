"""
Reference Trajectories and Transition Datasets.

Environment factory, noise-at-mean reference sampling with the baseline
policy, and Monte-Carlo collection of (s, a, s') transitions under an
excitation policy, with CSV persistence.
"""

import csv
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from shiftguard.environments import acc, dubins, linear_car
from shiftguard.environments.base import Environment, Policy
from shiftguard.errors import DimensionMismatchError, DomainError

logger = logging.getLogger(__name__)

ENV_KINDS = ("dubins", "linear_car", "acc")


def make_env(
    kind: str,
    deployment: bool,
    seed: Optional[int] = None,
    path: Optional[dubins.PathSpec] = None,
) -> Environment:
    """
    Build the training or deployment variant of an environment.

    Args:
        kind: One of dubins, linear_car, acc
        deployment: Deployment parameters when True, training parameters otherwise
        seed: Seed of the environment's own generator
        path: Dubins reference path

    Returns:
        The environment, not yet reset
    """
    if kind == "dubins":
        params = dubins.DEPLOY_PARAMS if deployment else dubins.TRAIN_PARAMS
        return dubins.DubinsEnv(params, deployment, seed, path)
    if kind == "linear_car":
        params = linear_car.DEPLOY_PARAMS if deployment else linear_car.TRAIN_PARAMS
        return linear_car.LinearCarEnv(params, deployment, seed)
    if kind == "acc":
        params = acc.DEPLOY_PARAMS if deployment else acc.TRAIN_PARAMS
        return acc.AccEnv(params, deployment, seed)
    raise ValueError(f"unknown environment kind {kind!r}, expected one of {ENV_KINDS}")


@dataclass
class Dataset:
    """Aligned transitions: states (N, n), actions (N, m), next_states (N, n)."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        if min(len(self.states), len(self.actions), len(self.next_states)) == 0:
            raise DomainError("a dataset needs at least one transition")
        self.states = np.asarray(self.states, dtype=float).reshape(len(self.states), -1)
        self.actions = np.asarray(self.actions, dtype=float).reshape(len(self.actions), -1)
        self.next_states = np.asarray(self.next_states, dtype=float).reshape(len(self.next_states), -1)
        if not (len(self.states) == len(self.actions) == len(self.next_states)):
            raise DimensionMismatchError("states, actions and next_states have different lengths")

    def __len__(self) -> int:
        return len(self.states)

    def header(self):
        n, m = self.states.shape[1], self.actions.shape[1]
        return (
            [f"s_{i}" for i in range(n)]
            + [f"a_{i}" for i in range(m)]
            + [f"sp_{i}" for i in range(n)]
        )

    def split(self, fraction: float, rng: np.random.Generator) -> Tuple["Dataset", "Dataset"]:
        """Random (train, validation) split with ``fraction`` of rows held out."""
        order = rng.permutation(len(self))
        n_val = int(np.floor(fraction * len(self)))
        if not 0 < n_val < len(self):
            raise DomainError(f"holding out {fraction} of {len(self)} rows leaves an empty part")
        val, train = np.sort(order[:n_val]), np.sort(order[n_val:])
        return self.subset(train), self.subset(val)

    def subset(self, index) -> "Dataset":
        return Dataset(self.states[index], self.actions[index], self.next_states[index])

    def to_csv(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = np.hstack([self.states, self.actions, self.next_states])
        with tempfile.NamedTemporaryFile("w", newline="", dir=path.parent, delete=False, suffix=".tmp") as handle:
            writer = csv.writer(handle)
            writer.writerow(self.header())
            for row in rows:
                writer.writerow([repr(float(v)) for v in row])
        os.replace(handle.name, path)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Dataset":
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None:
                raise DomainError(f"{path} is empty")
            rows = np.array([[float(v) for v in row] for row in reader], dtype=float)
        n = sum(1 for h in header if h.startswith("s_"))
        m = sum(1 for h in header if h.startswith("a_"))
        if len(header) != 2 * n + m:
            raise DimensionMismatchError(f"unexpected dataset header {header}")
        if rows.size == 0:
            raise DomainError(f"{path} holds no transitions")
        rows = rows.reshape(-1, 2 * n + m)
        return cls(rows[:, :n], rows[:, n:n + m], rows[:, n + m:])


def sample_reference(env: Environment, pi_star: Policy, horizon: int, state=None) -> np.ndarray:
    """
    Closed-loop trajectory of ``pi_star`` on ``env`` with the noise at its mean.

    Args:
        env: Usually the training environment
        pi_star: Baseline policy
        horizon: Number of steps T
        state: Full initial state (the environment default when None)

    Returns:
        Observations of shape (T + 1, n); row 0 is the initial observation
    """
    current = env.default_state() if state is None else np.array(state, dtype=float)
    observations = [env.observation(current)]
    for t in range(horizon):
        action = env.clip_action(pi_star(observations[-1], t))
        current = env.simulate(current, action)
        observations.append(env.observation(current))
    return np.array(observations)


class ClosedLoopPlanner:
    """
    One noise-at-mean step of ``pi_star`` on ``env`` from a given full state.

    This is the reference trajectory re-sampled from the current state: at a
    state on the reference it returns the reference's next row.
    """

    def __init__(self, env: Environment, pi_star: Policy):
        self.env = env
        self.pi_star = pi_star

    def __call__(self, state, observation, t: int) -> np.ndarray:
        action = self.env.clip_action(self.pi_star(observation, t))
        return self.env.observation(self.env.simulate(np.asarray(state, dtype=float), action))


def collect_transitions(
    env: Environment,
    pi_star: Policy,
    count: int,
    rng: np.random.Generator,
    episode_length: int = 50,
    uniform_fraction: float = 0.5,
    dither: float = 0.1,
) -> Dataset:
    """
    Monte-Carlo transitions (observation, action, next observation) from ``env``.

    Episodes of ``episode_length`` steps start from the environment's initial
    state sampler. Each action is uniform on [l, u] with probability
    ``uniform_fraction``, otherwise pi* plus uniform dither of
    +-dither * (u - l) / 2, clipped to the box.

    Args:
        env: Environment to sample (the deployment one for surrogates)
        pi_star: Baseline policy
        count: Number of transitions
        rng: Generator for initial states, actions and transition noise
        episode_length: Steps per episode
        uniform_fraction: Probability of a uniform action
        dither: Relative dither amplitude around pi*

    Returns:
        Dataset with exactly ``count`` rows
    """
    states, actions, next_states = [], [], []
    half_width = 0.5 * (env.upper - env.lower)
    while len(states) < count:
        current = env.initial_state(rng)
        for t in range(episode_length):
            if len(states) >= count:
                break
            observation = env.observation(current)
            if rng.random() < uniform_fraction:
                action = rng.uniform(env.lower, env.upper)
            else:
                action = pi_star(observation, t) + rng.uniform(-dither, dither, size=env.action_dim) * half_width
            action = env.clip_action(action)
            current = env.transition(current, action, rng)
            states.append(observation)
            actions.append(action)
            next_states.append(env.observation(current))
    logger.info(f"Collected {count} transitions from {env.kind} ({'deployment' if env.deployment else 'training'})")
    return Dataset(np.array(states), np.array(actions), np.array(next_states))
