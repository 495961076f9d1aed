"""
Policy Adaptation.

Convex action adaptation against a certified residual bound, the
precautionary comparison with the baseline action, and the closed-loop
episode runner that applies both under a distribution shift.

The adaptation program searches jointly for an action region
E(U^-1 V, tau2 U^-1) and the tightest ellipsoid E(0, Omega^-1) bounding
mean_net(s, a) - target over the state confidence region and that action
region:

    max  logdet(Omega)
    s.t. M_out(Omega) - tau1 M_s - E2^T [[-U, V], [V^T, tau2]] E2 - M_phi >= 0
         U l <= V <= U u
         trace(U) delta <= tau2
         trust_floor * I <= U <= max_tightness * I

It is assembled in coordinates centred on an anchor action a0 and scaled by
the half-widths of the actuator box. The relaxed action constraint always
holds at the coordinate origin, so the anchor is chosen first by a
box-constrained Gauss-Newton descent on the surrogate residual.

Episodes aim either at the reference row tau_opt(t+1) or, with the replan
target, at the next state of the training closed loop started from the
current state. Residuals are always logged against the reference.
"""

import csv
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg, optimize

from shiftguard import conic
from shiftguard.conic import ConicSolver, LinearExpression, MatrixExpression, ProgramBuilder, SolverSettings
from shiftguard.deep_sdp import (
    QCMultipliers,
    add_multiplier_variables,
    build_layout,
    constant_selector,
    fold_input_map,
    interval_bounds,
    multipliers_from_values,
    output_map,
    phi_terms,
    region_block,
    require_relu,
    selector_matrices,
)
from shiftguard.environments.base import Environment, Planner, Policy
from shiftguard.errors import (
    AdaptationUnavailableError,
    DimensionMismatchError,
    DomainError,
    InvalidDistributionError,
)
from shiftguard.gaussian import Ellipsoid, Gaussian, as_vector
from shiftguard.pso import PsoConfig, pso_adapt_step
from shiftguard.relu_net import ReluNetwork
from shiftguard.state import StepRecord, initialize_step_record
from shiftguard.surrogate import SurrogatePair

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 1e-6
DEFAULT_TRUST_FLOOR = 1e-8
TIE_TOL = 1e-12
CLIP_TOL = 1e-9
MAX_HALVINGS = 20
RETRY_TOL = 1e-6

MODES = ("adapted", "unadapted", "pso")


class AdaptOptions(BaseModel):
    """Knobs of the adaptation program and of the closed-loop runner."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    trust_floor: float = Field(default=DEFAULT_TRUST_FLOOR, gt=0.0)
    anchor_strategy: Literal["descent", "origin"] = "descent"
    anchor_iterations: int = Field(default=10, ge=0)
    scale_actions: bool = True
    use_interval_bounds: bool = False
    max_tightness: float = Field(default=1e6, gt=0.0)
    initial_variance: float = Field(default=1e-6, gt=0.0)
    pso_surrogate: Literal["mean", "deep"] = "mean"
    target: Literal["reference", "replan"] = "reference"
    solver: SolverSettings = Field(default_factory=SolverSettings)


@dataclass(frozen=True, eq=False)
class AdaptProblem:
    """
    One adaptation step.

    Attributes:
        mean_net: ReLU mean surrogate on [features(s), a]
        state_region: Confidence ellipsoid of the current state in feature space
        target: Desired next state, the reference row tau_opt(t+1) or a replanned one
        lower: Actuator lower bounds
        upper: Actuator upper bounds
        delta: Regulation factor in trace(U) delta <= tau2
        trust_floor: Smallest admissible eigenvalue of U
        anchor: Fixed anchor action (skips the descent)
        initial_action: Start of the anchor descent, usually the pi* action
        anchor_strategy: "descent", or "origin" for raw action coordinates
        max_tightness: Upper eigenvalue cap on Omega and U
    """

    mean_net: ReluNetwork
    state_region: Ellipsoid
    target: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    delta: float = DEFAULT_DELTA
    trust_floor: float = DEFAULT_TRUST_FLOOR
    anchor: Optional[np.ndarray] = None
    initial_action: Optional[np.ndarray] = None
    anchor_iterations: int = 10
    anchor_strategy: str = "descent"
    scale_actions: bool = True
    use_interval_bounds: bool = False
    max_tightness: float = 1e6
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        lower = as_vector(self.lower, "lower")
        upper = as_vector(self.upper, "upper")
        target = as_vector(self.target, "target")
        if lower.shape != upper.shape:
            raise DimensionMismatchError("lower and upper bounds have different sizes")
        if np.any(lower >= upper):
            raise DomainError("actuator bounds need lower < upper elementwise")
        if self.delta <= 0.0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if self.trust_floor <= 0.0:
            raise DomainError(f"trust floor must be positive, got {self.trust_floor}")
        if self.anchor_strategy not in ("descent", "origin"):
            raise ValueError(f"unknown anchor strategy {self.anchor_strategy!r}")
        if self.state_region.dim + lower.size != self.mean_net.input_dim:
            raise DimensionMismatchError(
                f"state region ({self.state_region.dim}) plus action ({lower.size}) "
                f"does not match network input {self.mean_net.input_dim}"
            )
        if target.size != self.mean_net.output_dim:
            raise DimensionMismatchError(
                f"target has {target.size} entries, network outputs {self.mean_net.output_dim}"
            )
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "target", target)
        for name in ("anchor", "initial_action"):
            value = getattr(self, name)
            if value is not None:
                value = as_vector(value, name)
                if value.size != lower.size:
                    raise DimensionMismatchError(f"{name} has {value.size} entries, expected {lower.size}")
                object.__setattr__(self, name, np.clip(value, lower, upper))

    @property
    def action_dim(self) -> int:
        return self.lower.size

    @classmethod
    def from_options(
        cls,
        mean_net: ReluNetwork,
        state_region: Ellipsoid,
        target,
        lower,
        upper,
        delta: float,
        options: AdaptOptions,
        initial_action=None,
    ) -> "AdaptProblem":
        return cls(
            mean_net=mean_net,
            state_region=state_region,
            target=target,
            lower=lower,
            upper=upper,
            delta=delta,
            trust_floor=options.trust_floor,
            initial_action=initial_action,
            anchor_iterations=options.anchor_iterations,
            anchor_strategy=options.anchor_strategy,
            scale_actions=options.scale_actions,
            use_interval_bounds=options.use_interval_bounds,
            max_tightness=options.max_tightness,
            solver=options.solver,
        )


@dataclass
class AdaptSolution:
    """
    Optimal adaptation step in physical action units.

    adapted_action is U^-1 V clipped into the actuator box; pre_clip_action
    is U^-1 V itself.
    """

    U: np.ndarray
    V: np.ndarray
    tau1: float
    tau2: float
    multipliers: QCMultipliers
    omega: np.ndarray
    adapted_action: np.ndarray
    pre_clip_action: np.ndarray
    anchor: np.ndarray
    log_det_bound: float
    solve_time_s: float
    clipped: bool = False
    status: str = conic.OPTIMAL

    def action_region(self) -> Ellipsoid:
        """E(U^-1 V, tau2 U^-1)."""
        shape = self.tau2 * np.linalg.inv(self.U)
        return Ellipsoid(np.linalg.solve(self.U, self.V), 0.5 * (shape + shape.T))

    def residual_bound(self) -> Ellipsoid:
        """E(0, Omega^-1) containing every reachable residual."""
        shape = np.linalg.inv(self.omega)
        return Ellipsoid(np.zeros(self.omega.shape[0]), 0.5 * (shape + shape.T))


def surrogate_descent(
    net: ReluNetwork,
    state,
    target,
    lower,
    upper,
    start=None,
    iterations: int = 10,
) -> np.ndarray:
    """
    Box-constrained Gauss-Newton on ||target - net([state, a])||^2.

    Every step solves a bounded linear least-squares problem on the local
    affine model of the network. Steps are halved until the residual does not
    increase, so the result is never worse than ``start``.

    Args:
        net: Network on [state, action]
        state: Fixed network input prefix
        target: Desired output
        lower: Action lower bounds
        upper: Action upper bounds
        start: Initial action (box midpoint when None)
        iterations: Maximum number of Gauss-Newton steps

    Returns:
        Action within [lower, upper]
    """
    state = as_vector(state, "state")
    target = as_vector(target, "target")
    lower = as_vector(lower, "lower")
    upper = as_vector(upper, "upper")
    n = state.size
    action = np.clip(0.5 * (lower + upper) if start is None else as_vector(start, "start"), lower, upper)

    def residual(a: np.ndarray) -> np.ndarray:
        return net.forward(np.concatenate([state, a])) - target

    r = residual(action)
    cost = float(r @ r)
    for _ in range(iterations):
        jacobian = net.input_jacobian(np.concatenate([state, action]))[:, n:]
        if not np.any(jacobian) or cost == 0.0:
            break
        step = optimize.lsq_linear(jacobian, -r, bounds=(lower - action, upper - action)).x
        accepted = False
        for _ in range(MAX_HALVINGS):
            candidate = np.clip(action + step, lower, upper)
            r_new = residual(candidate)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            break
        progress = cost - cost_new
        action, r, cost = candidate, r_new, cost_new
        if progress <= 1e-14 * max(cost, 1.0):
            break
    return action


def _anchor(problem: AdaptProblem, state_center: np.ndarray) -> np.ndarray:
    if problem.anchor_strategy == "origin":
        return np.zeros(problem.action_dim)
    if problem.anchor is not None:
        return problem.anchor
    return surrogate_descent(
        problem.mean_net,
        state_center,
        problem.target,
        problem.lower,
        problem.upper,
        start=problem.initial_action,
        iterations=problem.anchor_iterations,
    )


def _sym_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 0.5 * (np.outer(a, b) + np.outer(b, a))


def _relaxed_settings(settings: SolverSettings) -> SolverSettings:
    return settings.model_copy(update={
        "feasibility_tol": max(settings.feasibility_tol, RETRY_TOL),
        "gap_tol": max(settings.gap_tol, RETRY_TOL),
        "max_iterations": 2 * settings.max_iterations,
    })


def solve_adaptation(problem: AdaptProblem, solver: Optional[ConicSolver] = None) -> AdaptSolution:
    """
    Adapted action minimizing the certified residual bound.

    Args:
        problem: Adaptation instance
        solver: Conic backend (cvxpy by default)

    Returns:
        Optimal solution with the recovered action clipped into [lower, upper]

    Raises:
        NotReluNetworkError: If the mean network is not ReLU
        AdaptationUnavailableError: If the program is infeasible or the backend fails
        SolverError: If no conic backend is installed
    """
    net = problem.mean_net
    require_relu(net)
    region = problem.state_region
    n, m, k = region.dim, problem.action_dim, net.output_dim
    layout = build_layout(net, n, m)

    anchor = _anchor(problem, region.center)
    scale = 0.5 * (problem.upper - problem.lower) if problem.scale_actions else np.ones(m)
    lower_n = (problem.lower - anchor) / scale
    upper_n = (problem.upper - anchor) / scale

    transform = linalg.block_diag(region.root, np.diag(scale))
    normalized = fold_input_map(net, transform, np.concatenate([region.center, anchor]))
    unit_state = Ellipsoid(np.zeros(n), np.eye(n))
    half = 0.5 * (upper_n - lower_n)
    box = Ellipsoid(0.5 * (lower_n + upper_n), m * np.diag(half ** 2))

    bounds = interval_bounds(normalized, unit_state, box)
    target = problem.target
    sigma = float(np.max(np.abs(np.concatenate([bounds.output_lower - target, bounds.output_upper - target]))))
    if not np.isfinite(sigma) or sigma <= 0.0:
        sigma = 1.0
    g = output_map(normalized, target, layout) / sigma
    e1, _ = selector_matrices(layout)
    e = constant_selector(layout)
    action_block = np.zeros((layout.size, m))
    action_block[layout.action, :] = np.eye(m)

    builder = ProgramBuilder()
    builder.matrix("omega", k)
    builder.matrix("U", m)
    builder.scalar("tau_state", lower=0.0)
    builder.scalar("tau_action", lower=0.0)
    for j in range(m):
        builder.scalar(f"v_{j}")

    lmi = (
        MatrixExpression.zeros(layout.size)
        .plus_constant(np.outer(e, e))
        .plus_congruence("omega", g.T, -1.0)
        .plus_scalar("tau_state", -(e1.T @ region_block(unit_state.center, unit_state.shape) @ e1))
        .plus_congruence("U", action_block, 1.0)
        .plus_scalar("tau_action", -np.outer(e, e))
    )
    for j in range(m):
        unit = np.zeros(layout.size)
        unit[n + j] = 1.0
        lmi = lmi.plus_scalar(f"v_{j}", -2.0 * _sym_outer(unit, e))
    terms = phi_terms(normalized, layout, bounds if problem.use_interval_bounds else None)
    lmi = add_multiplier_variables(builder, terms, lmi)
    builder.require_psd("adaptation_lmi", lmi)
    builder.require_psd(
        "tightness_cap",
        MatrixExpression.zeros(k).plus_constant(problem.max_tightness * np.eye(k)).plus_congruence("omega", np.eye(k), -1.0),
    )
    builder.require_psd(
        "trust_floor",
        MatrixExpression.zeros(m).plus_congruence("U", np.eye(m), 1.0).plus_constant(-problem.trust_floor * np.diag(scale ** 2)),
    )
    builder.require_psd(
        "action_cap",
        MatrixExpression.zeros(m).plus_constant(problem.max_tightness * np.diag(scale ** 2)).plus_congruence("U", np.eye(m), -1.0),
    )
    for j in range(m):
        unit = np.zeros(m)
        unit[j] = 1.0
        builder.require_nonnegative(
            f"action_lower_{j}",
            LinearExpression().plus_scalar(f"v_{j}", 1.0).plus_trace("U", -_sym_outer(unit, lower_n)),
        )
        builder.require_nonnegative(
            f"action_upper_{j}",
            LinearExpression().plus_trace("U", _sym_outer(unit, upper_n)).plus_scalar(f"v_{j}", -1.0),
        )
    builder.require_nonnegative(
        "trace_floor",
        LinearExpression().plus_scalar("tau_action", 1.0).plus_trace("U", -problem.delta * np.diag(scale ** -2.0)),
    )
    builder.maximize_logdet("omega")

    program = builder.build()
    result = conic.solve(program, problem.solver, solver)
    if result.status == conic.NUMERICAL_FAILURE:
        relaxed = _relaxed_settings(problem.solver)
        logger.info(f"Adaptation program failed numerically, retrying at tolerance {relaxed.feasibility_tol:.0e}")
        result = conic.solve(program, relaxed, solver)
    if not result.optimal:
        logger.warning(f"Adaptation program {result.status}: {result.diagnostics}")
        raise AdaptationUnavailableError(
            f"adaptation program {result.status}", result.status, result.diagnostics
        )

    values = result.values
    u_n = np.asarray(values["U"], dtype=float)
    u_n = 0.5 * (u_n + u_n.T)
    omega = np.asarray(values["omega"], dtype=float) / sigma ** 2
    omega = 0.5 * (omega + omega.T)
    if np.linalg.eigvalsh(u_n)[0] <= 0.0 or np.linalg.eigvalsh(omega)[0] <= 0.0:
        raise AdaptationUnavailableError(
            "adaptation program returned a singular U or Omega", conic.NUMERICAL_FAILURE, result.diagnostics
        )
    v_n = np.array([float(values[f"v_{j}"]) for j in range(m)])
    pre_clip = anchor + scale * np.linalg.solve(u_n, v_n)
    inverse_scale = np.diag(1.0 / scale)
    u = inverse_scale @ u_n @ inverse_scale
    u = 0.5 * (u + u.T)
    action = np.clip(pre_clip, problem.lower, problem.upper)
    clipped = bool(np.max(np.abs(action - pre_clip)) > CLIP_TOL)
    if clipped:
        logger.warning(f"Adapted action {pre_clip} clipped into the actuator box")
    _, logdet_omega = np.linalg.slogdet(omega)

    return AdaptSolution(
        U=u,
        V=u @ pre_clip,
        tau1=float(values["tau_state"]),
        tau2=float(values["tau_action"]),
        multipliers=multipliers_from_values(values, layout.hidden_neurons, problem.use_interval_bounds),
        omega=omega,
        adapted_action=action,
        pre_clip_action=pre_clip,
        anchor=anchor,
        log_det_bound=float(-logdet_omega),
        solve_time_s=result.solve_time_s,
        clipped=clipped,
    )


@dataclass
class StepDecision:
    """Outcome of the precautionary comparison between pi* and the adapted action."""

    pi_star_action: np.ndarray
    adapted_action: Optional[np.ndarray]
    pi_star_residual: float
    adapted_residual: Optional[float]
    action: np.ndarray
    chosen: str
    log_det_bound: Optional[float] = None


def select_action(
    state,
    pi_star_action,
    adapted_action,
    predict: Callable[[np.ndarray, np.ndarray], np.ndarray],
    target,
    log_det_bound: Optional[float] = None,
) -> StepDecision:
    """
    Apply whichever candidate the comparison surrogate predicts lands closer to ``target``.

    Ties within 1e-12 go to the pi* action.

    Args:
        state: Current state s_t
        pi_star_action: Baseline action at s_t
        adapted_action: Adapted action, or None when adaptation was unavailable
        predict: Comparison surrogate (s, a) -> next state
        target: Reference next state
        log_det_bound: Bound volume reported with the adapted action

    Returns:
        The decision with both residuals
    """
    state = as_vector(state, "state")
    target = as_vector(target, "target")
    pi_star_action = as_vector(pi_star_action, "pi_star_action")
    pi_residual = float(np.linalg.norm(target - predict(state, pi_star_action)))
    if adapted_action is None:
        return StepDecision(pi_star_action, None, pi_residual, None, pi_star_action, "pi_star", log_det_bound)

    adapted_action = as_vector(adapted_action, "adapted_action")
    adapted_residual = float(np.linalg.norm(target - predict(state, adapted_action)))
    if adapted_residual < pi_residual - TIE_TOL:
        chosen, action = "adapted", adapted_action
    else:
        chosen, action = "pi_star", pi_star_action
    return StepDecision(
        pi_star_action, adapted_action, pi_residual, adapted_residual, action, chosen, log_det_bound
    )


@dataclass
class EpisodeLog:
    """Per-step records of one closed-loop episode."""

    mode: str
    state_dim: int
    action_dim: int
    records: List[StepRecord] = field(default_factory=list)
    error: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    def residuals(self) -> np.ndarray:
        return np.array([r["residual_norm"] for r in self.records], dtype=float)

    def header(self) -> List[str]:
        return (
            ["t"]
            + [f"ref_{i}" for i in range(self.state_dim)]
            + [f"s_{i}" for i in range(self.state_dim)]
            + [f"a_{i}" for i in range(self.action_dim)]
            + ["residual_norm", "logdet_bound", "solver_status", "solve_ms"]
        )

    def rows(self) -> List[list]:
        rows = []
        for r in self.records:
            logdet = "" if r["logdet_bound"] is None else repr(float(r["logdet_bound"]))
            rows.append(
                [r["t"]]
                + [repr(v) for v in r["reference"]]
                + [repr(v) for v in r["observation"]]
                + [repr(v) for v in r["action"]]
                + [repr(float(r["residual_norm"])), logdet, r["solver_status"], repr(float(r["solve_ms"]))]
            )
        return rows

    def to_csv(self, path: Union[str, Path]):
        """Write the episode CSV atomically."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile("w", newline="", dir=path.parent, delete=False, suffix=".tmp") as handle:
            writer = csv.writer(handle)
            writer.writerow(self.header())
            writer.writerows(self.rows())
        os.replace(handle.name, path)

    def summary(self, seed: int) -> Dict[str, Union[int, float]]:
        """seed, mean_residual, max_residual, total_solve_ms and min_d_rel when recorded."""
        residuals = self.residuals()
        row: Dict[str, Union[int, float]] = {
            "seed": int(seed),
            "mean_residual": float(residuals.mean()) if residuals.size else float("nan"),
            "max_residual": float(residuals.max()) if residuals.size else float("nan"),
        }
        gaps = [r["aux"]["d_rel"] for r in self.records if "d_rel" in r["aux"]]
        if gaps:
            row["min_d_rel"] = float(min(gaps))
        row["total_solve_ms"] = float(sum(r["solve_ms"] for r in self.records))
        return row


def _state_region(
    surrogates: SurrogatePair,
    observation: np.ndarray,
    previous: Optional[tuple],
    confidence: float,
    initial_variance: float,
) -> Ellipsoid:
    if previous is None:
        cov = initial_variance * np.eye(observation.size)
    else:
        cov = surrogates.predict_cov(*previous)
    return surrogates.embed_region(Gaussian(observation, cov), confidence)


def run_episode(
    env: Environment,
    surrogates: SurrogatePair,
    pi_star: Policy,
    reference,
    confidence: float = 0.95,
    delta: float = DEFAULT_DELTA,
    horizon: Optional[int] = None,
    mode: str = "adapted",
    options: Optional[AdaptOptions] = None,
    pso_cfg: Optional[PsoConfig] = None,
    seed: int = 0,
    initial_state=None,
    solver: Optional[ConicSolver] = None,
    planner: Optional[Planner] = None,
) -> EpisodeLog:
    """
    Run one closed-loop episode on ``env``.

    Step 0 always applies pi*. Afterwards the adapted mode builds the state
    confidence region around the observation (covariance initial_variance * I
    at step 1, Sigma_NN of the previous step's input later), solves the
    adaptation program, and applies whichever of pi* and the adapted action
    the comparison surrogate prefers. Any adaptation failure falls back to pi*.

    Args:
        env: Environment to drive (usually the deployment one)
        surrogates: Trained surrogates of the deployment dynamics
        pi_star: Baseline policy
        reference: Reference trajectory with at least horizon + 1 rows
        confidence: Confidence level p of the state region
        delta: Regulation factor
        horizon: Number of steps (len(reference) - 1 when None)
        mode: adapted, unadapted or pso
        options: Adaptation options
        pso_cfg: Swarm configuration for the pso mode
        seed: Seed of the PSO swarms
        initial_state: Full initial state (environment default when None)
        solver: Conic backend
        planner: Next-state target from the current state, required when
            ``options.target`` is replan

    Returns:
        Episode log; on an environment failure the log is partial and ``error`` is set
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    options = options or AdaptOptions()
    pso_cfg = pso_cfg or PsoConfig()
    if options.target == "replan" and planner is None:
        raise ValueError("the replan target needs a planner")
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    horizon = reference.shape[0] - 1 if horizon is None else int(horizon)
    if horizon < 0 or reference.shape[0] < horizon + 1:
        raise DimensionMismatchError(f"reference has {reference.shape[0]} rows, need {horizon + 1}")
    if reference.shape[1] != surrogates.state_dim or env.action_dim != surrogates.action_dim:
        raise DimensionMismatchError("environment, surrogates and reference disagree on dimensions")

    log = EpisodeLog(mode, surrogates.state_dim, surrogates.action_dim)
    pso_predict = surrogates.comparison_mean if options.pso_surrogate == "deep" else surrogates.predict_mean
    observation = env.reset(initial_state)
    previous = None

    for t in range(horizon):
        target = reference[t + 1]
        if options.target == "replan" and mode != "unadapted":
            target = as_vector(planner(env.state, observation, t), "planned target")
        record = initialize_step_record(t, reference[t], observation)
        pi_action = env.clip_action(pi_star(observation, t))
        action = pi_action

        if mode == "adapted" and t > 0:
            start = time.perf_counter()
            adapted, logdet = None, None
            try:
                region = _state_region(surrogates, observation, previous, confidence, options.initial_variance)
                problem = AdaptProblem.from_options(
                    surrogates.mean_net, region, target, env.lower, env.upper, delta, options, pi_action
                )
                solution = solve_adaptation(problem, solver)
                adapted, logdet = solution.adapted_action, solution.log_det_bound
                record["solver_status"] = solution.status
            except AdaptationUnavailableError as exc:
                logger.warning(f"Step {t}: adaptation unavailable ({exc.status}), falling back to pi*")
                record["solver_status"] = exc.status
            except InvalidDistributionError as exc:
                logger.warning(f"Step {t}: state region unusable ({exc.detail}), falling back to pi*")
                record["solver_status"] = "invalid_region"
            decision = select_action(observation, pi_action, adapted, surrogates.comparison_mean, target, logdet)
            action = decision.action
            record["solve_ms"] = 1000.0 * (time.perf_counter() - start)
            record["logdet_bound"] = logdet
            record["pi_star_residual"] = decision.pi_star_residual
            record["adapted_residual"] = decision.adapted_residual
            record["chosen"] = decision.chosen
        elif mode == "pso" and t > 0:
            start = time.perf_counter()
            result = pso_adapt_step(
                observation, target, pso_predict, pso_cfg, env.lower, env.upper, seed=seed * 100003 + t
            )
            action = env.clip_action(result.x)
            record["solve_ms"] = 1000.0 * (time.perf_counter() - start)
            record["solver_status"] = "pso"
            record["chosen"] = "pso"

        try:
            next_observation = env.step(action)
        except Exception as exc:
            logger.error(f"Environment step {t} failed: {exc}")
            log.error = str(exc)
            break
        record["action"] = [float(v) for v in action]
        record["residual_norm"] = float(np.linalg.norm(reference[t + 1] - next_observation))
        record["aux"] = env.aux()
        log.records.append(record)
        previous = (observation, action)
        observation = next_observation

    if log.records:
        logger.info(
            f"Episode ({mode}) finished: {len(log)} steps, mean residual {float(log.residuals().mean()):.4f}"
        )
    return log
