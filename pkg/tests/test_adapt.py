import csv

import numpy as np
import pytest

from shiftguard import conic
from shiftguard.adapt import (
    AdaptOptions,
    AdaptProblem,
    EpisodeLog,
    run_episode,
    select_action,
    solve_adaptation,
    surrogate_descent,
)
from shiftguard.conic import ConicSolver, SolverResult, SolverSettings
from shiftguard.environments.base import EnvSpec, Environment
from shiftguard.environments.sampling import ClosedLoopPlanner, sample_reference
from shiftguard.errors import AdaptationUnavailableError, DimensionMismatchError, DomainError
from shiftguard.gaussian import Ellipsoid, sample_in_ellipsoid, sample_on_ellipsoid_boundary
from shiftguard.pso import PsoConfig
from shiftguard.relu_net import ReluNetwork
from shiftguard.state import initialize_step_record
from shiftguard.surrogate import SurrogatePair

A = np.array([[1.0, 0.1], [0.0, 0.9]])
B = np.array([0.2, 1.0])
C = np.array([0.05, -0.02])


class AffineEnv(Environment):
    """Deterministic s' = A s + gain * B a + c on a 2-D state with a in [-2, 2]."""

    kind = "affine"

    def __init__(self, fail_at=None, gain=1.0):
        super().__init__(EnvSpec(2, 1, np.array([-2.0]), np.array([2.0]), 0.1), deployment=True, seed=0)
        self.fail_at = fail_at
        self.gain = gain
        self.steps = 0

    def default_state(self):
        return np.zeros(2)

    def initial_state(self, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def simulate(self, state, action):
        return A @ state + self.gain * B * action[0] + C

    def transition(self, state, action, rng):
        self.steps += 1
        if self.fail_at is not None and self.steps > self.fail_at:
            raise RuntimeError("simulator crashed")
        return self.simulate(state, action)

    def auxiliary(self, state):
        return {"d_rel": float(10.0 - state[0])}


def zero_policy(observation, t=0):
    return np.zeros(1)


def damping_policy(observation, t=0):
    return np.array([-0.5 * observation[1]])


class _FixedSolver(ConicSolver):
    def __init__(self, result):
        self.result = result

    def solve(self, program, settings=None):
        return self.result


class _RecordingSolver(_FixedSolver):
    def __init__(self, result):
        super().__init__(result)
        self.settings = []

    def solve(self, program, settings=None):
        self.settings.append(settings)
        return self.result


@pytest.fixture
def surrogates(affine_net):
    cov_net = ReluNetwork.affine(np.zeros((2, 3)), np.log([1e-6, 1e-6]))
    return SurrogatePair(affine_net, cov_net)


@pytest.fixture
def tiny_region():
    return Ellipsoid(np.array([0.3, -0.2]), 1e-8 * np.eye(2))


def test_descent_solves_affine_case(affine_net, tiny_region):
    target = affine_net.forward(np.concatenate([tiny_region.center, [0.7]]))
    action = surrogate_descent(affine_net, tiny_region.center, target, [-2.0], [2.0], start=[-1.5])
    np.testing.assert_allclose(action, [0.7], atol=1e-9)


def test_descent_stops_at_the_box(affine_net, tiny_region):
    target = affine_net.forward(np.concatenate([tiny_region.center, [3.0]]))
    action = surrogate_descent(affine_net, tiny_region.center, target, [-2.0], [2.0])
    np.testing.assert_allclose(action, [2.0], atol=1e-9)


def test_descent_never_increases_residual(small_relu_net, rng):
    state = np.array([0.2, -0.1])
    for _ in range(10):
        target = rng.normal(size=2)
        start = rng.uniform(-1.0, 1.0, size=1)
        action = surrogate_descent(small_relu_net, state, target, [-1.0], [1.0], start=start)
        before = np.linalg.norm(small_relu_net.forward(np.concatenate([state, start])) - target)
        after = np.linalg.norm(small_relu_net.forward(np.concatenate([state, action])) - target)
        assert after <= before + 1e-12
        assert -1.0 <= action[0] <= 1.0


def test_problem_validation(affine_net, tiny_region):
    target = np.zeros(2)
    with pytest.raises(DomainError):
        AdaptProblem(affine_net, tiny_region, target, [1.0], [1.0])
    with pytest.raises(DomainError):
        AdaptProblem(affine_net, tiny_region, target, [-1.0], [1.0], delta=0.0)
    with pytest.raises(DimensionMismatchError):
        AdaptProblem(affine_net, tiny_region, np.zeros(3), [-1.0], [1.0])
    with pytest.raises(DimensionMismatchError):
        AdaptProblem(affine_net, tiny_region, target, [-1.0, -1.0], [1.0, 1.0])
    problem = AdaptProblem(affine_net, tiny_region, target, [-1.0], [1.0], initial_action=[5.0])
    np.testing.assert_allclose(problem.initial_action, [1.0])


def test_solver_failure_raises_unavailable(affine_net, tiny_region):
    problem = AdaptProblem(affine_net, tiny_region, np.zeros(2), [-2.0], [2.0])
    failing = _FixedSolver(SolverResult(conic.INFEASIBLE, None, None, 0.0))
    with pytest.raises(AdaptationUnavailableError) as info:
        solve_adaptation(problem, solver=failing)
    assert info.value.status == conic.INFEASIBLE


def test_numerical_failure_is_retried_at_relaxed_tolerance(affine_net, tiny_region):
    settings = SolverSettings(feasibility_tol=1e-9, gap_tol=1e-8, max_iterations=150)
    problem = AdaptProblem(affine_net, tiny_region, np.zeros(2), [-2.0], [2.0], solver=settings)
    recording = _RecordingSolver(SolverResult(conic.NUMERICAL_FAILURE, None, None, 0.0))
    with pytest.raises(AdaptationUnavailableError) as info:
        solve_adaptation(problem, solver=recording)
    assert info.value.status == conic.NUMERICAL_FAILURE
    first, retry = recording.settings
    assert first == settings
    assert retry.feasibility_tol == 1e-6
    assert retry.gap_tol == 1e-6
    assert retry.max_iterations == 300


def test_infeasible_programs_are_not_retried(affine_net, tiny_region):
    problem = AdaptProblem(affine_net, tiny_region, np.zeros(2), [-2.0], [2.0])
    recording = _RecordingSolver(SolverResult(conic.INFEASIBLE, None, None, 0.0))
    with pytest.raises(AdaptationUnavailableError):
        solve_adaptation(problem, solver=recording)
    assert len(recording.settings) == 1


def test_replan_target_needs_a_planner(surrogates):
    with pytest.raises(ValueError):
        run_episode(AffineEnv(), surrogates, zero_policy, np.zeros((3, 2)), options=AdaptOptions(target="replan"))


def test_replan_residuals_are_logged_against_the_reference(surrogates):
    reference = sample_reference(AffineEnv(), damping_policy, 5) + 0.1
    failing = _FixedSolver(SolverResult(conic.INFEASIBLE, None, None, 0.0))
    replanned = run_episode(
        AffineEnv(gain=2.0), surrogates, damping_policy, reference, solver=failing,
        options=AdaptOptions(target="replan"), planner=ClosedLoopPlanner(AffineEnv(), damping_policy),
    )
    unadapted = run_episode(AffineEnv(gain=2.0), surrogates, damping_policy, reference, mode="unadapted")
    np.testing.assert_allclose(replanned.residuals(), unadapted.residuals())
    np.testing.assert_allclose(replanned.records[0]["residual_norm"], np.linalg.norm(reference[1] - C))


def test_select_action_prefers_closer_prediction():
    def predict(s, a):
        return s + a

    target = np.array([1.0])
    decision = select_action([0.0], [0.2], [0.9], predict, target, log_det_bound=-3.0)
    assert decision.chosen == "adapted"
    np.testing.assert_allclose(decision.action, [0.9])
    assert decision.adapted_residual == pytest.approx(0.1)

    decision = select_action([0.0], [0.9], [0.2], predict, target)
    assert decision.chosen == "pi_star"
    np.testing.assert_allclose(decision.action, [0.9])


def test_select_action_ties_go_to_pi_star():
    decision = select_action([0.0], [0.5], [1.5], lambda s, a: s + a, np.array([1.0]))
    assert decision.chosen == "pi_star"
    np.testing.assert_allclose(decision.action, [0.5])


def test_select_action_without_adapted_candidate():
    decision = select_action([0.0], [0.5], None, lambda s, a: s + a, np.array([1.0]))
    assert decision.chosen == "pi_star"
    assert decision.adapted_residual is None


def test_episode_log_csv_schema(tmp_path):
    log = EpisodeLog("adapted", state_dim=2, action_dim=1)
    record = initialize_step_record(0, [0.0, 0.0], [0.1, 0.2])
    record.update(action=[0.5], residual_norm=0.25, solve_ms=1.5, aux={"d_rel": 3.0})
    log.records.append(record)
    second = initialize_step_record(1, [0.1, 0.0], [0.2, 0.2])
    second.update(action=[0.4], residual_norm=0.75, logdet_bound=-4.0, solver_status="optimal", aux={"d_rel": 2.0})
    log.records.append(second)

    path = tmp_path / "episodes" / "adapted_seed0.csv"
    log.to_csv(path)
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == [
        "t", "ref_0", "ref_1", "s_0", "s_1", "a_0", "residual_norm", "logdet_bound", "solver_status", "solve_ms"
    ]
    assert rows[1][7] == ""
    assert rows[2][7] == "-4.0"
    assert rows[2][8] == "optimal"
    assert float(rows[1][6]) == 0.25

    summary = log.summary(seed=3)
    assert summary == {
        "seed": 3, "mean_residual": 0.5, "max_residual": 0.75, "min_d_rel": 2.0, "total_solve_ms": 1.5
    }


def test_zero_horizon_episode_is_empty(surrogates):
    log = run_episode(AffineEnv(), surrogates, zero_policy, np.zeros((1, 2)), horizon=0)
    assert len(log) == 0
    assert log.error is None


def test_episode_rejects_short_reference(surrogates):
    with pytest.raises(DimensionMismatchError):
        run_episode(AffineEnv(), surrogates, zero_policy, np.zeros((3, 2)), horizon=5)
    with pytest.raises(ValueError):
        run_episode(AffineEnv(), surrogates, zero_policy, np.zeros((3, 2)), mode="greedy")


def test_unadapted_episode_applies_pi_star(surrogates):
    log = run_episode(AffineEnv(), surrogates, zero_policy, np.zeros((6, 2)), mode="unadapted")
    assert len(log) == 5
    assert all(r["chosen"] == "pi_star" and r["action"] == [0.0] for r in log.records)
    assert all(r["solver_status"] == "pi_star" and r["solve_ms"] == 0.0 for r in log.records)
    np.testing.assert_allclose(log.records[0]["residual_norm"], np.linalg.norm(C))
    assert log.records[-1]["aux"]["d_rel"] < 10.0


def test_failed_adaptation_falls_back_to_pi_star(surrogates):
    failing = _FixedSolver(SolverResult(conic.INFEASIBLE, None, None, 0.0))
    log = run_episode(AffineEnv(), surrogates, zero_policy, np.zeros((4, 2)), solver=failing)
    unadapted = run_episode(AffineEnv(), surrogates, zero_policy, np.zeros((4, 2)), mode="unadapted")
    assert [r["solver_status"] for r in log.records] == ["pi_star", "infeasible", "infeasible"]
    assert all(r["chosen"] == "pi_star" for r in log.records)
    np.testing.assert_allclose(log.residuals(), unadapted.residuals())


def test_environment_failure_leaves_partial_log(surrogates):
    log = run_episode(AffineEnv(fail_at=2), surrogates, zero_policy, np.zeros((6, 2)), mode="unadapted")
    assert len(log) == 2
    assert log.error == "simulator crashed"


def test_pso_episode_uses_swarm_after_first_step(surrogates):
    cfg = PsoConfig(swarm_size=10, iterations=5)
    first = run_episode(AffineEnv(), surrogates, zero_policy, np.zeros((4, 2)), mode="pso", pso_cfg=cfg, seed=1)
    second = run_episode(AffineEnv(), surrogates, zero_policy, np.zeros((4, 2)), mode="pso", pso_cfg=cfg, seed=1)
    assert [r["chosen"] for r in first.records] == ["pi_star", "pso", "pso"]
    assert [r["action"] for r in first.records] == [r["action"] for r in second.records]
    assert all(-2.0 <= r["action"][0] <= 2.0 for r in first.records)


class TestAdaptationProgram:
    @pytest.fixture(autouse=True)
    def _backend(self):
        pytest.importorskip("cvxpy")

    def test_affine_dynamics_recover_the_exact_action(self, affine_net, tiny_region):
        target = affine_net.forward(np.concatenate([tiny_region.center, [0.7]]))
        problem = AdaptProblem(affine_net, tiny_region, target, [-2.0], [2.0], initial_action=[-1.0])
        solution = solve_adaptation(problem)
        assert solution.status == conic.OPTIMAL
        np.testing.assert_allclose(solution.adapted_action, [0.7], atol=1e-3)
        assert not solution.clipped
        assert np.isfinite(solution.log_det_bound)

    def test_unreachable_target_ends_on_the_box(self, affine_net, tiny_region):
        target = affine_net.forward(np.concatenate([tiny_region.center, [3.0]]))
        solution = solve_adaptation(AdaptProblem(affine_net, tiny_region, target, [-2.0], [2.0]))
        assert -2.0 <= solution.adapted_action[0] <= 2.0
        np.testing.assert_allclose(solution.adapted_action, [2.0], atol=1e-3)

    def test_solution_satisfies_constraints(self, small_relu_net, state_region):
        target = small_relu_net.forward([0.2, -0.1, 0.1])
        delta = 1e-4
        problem = AdaptProblem(small_relu_net, state_region, target, [-1.0], [1.0], delta=delta)
        solution = solve_adaptation(problem)
        u, v = solution.U, solution.V
        tol = 1e-6 * (1.0 + np.abs(u).max())
        assert np.trace(u) * delta <= solution.tau2 + tol
        assert np.all(v - u @ problem.lower >= -tol)
        assert np.all(u @ problem.upper - v >= -tol)
        assert np.linalg.eigvalsh(u)[0] >= problem.trust_floor - 1e-7
        assert solution.tau1 >= -1e-9
        np.testing.assert_allclose(np.linalg.solve(u, v), solution.pre_clip_action, rtol=1e-9, atol=1e-12)

    def test_bound_contains_reachable_residuals(self, small_relu_net, state_region, rng):
        target = small_relu_net.forward([0.2, -0.1, 0.1])
        solution = solve_adaptation(AdaptProblem(small_relu_net, state_region, target, [-1.0], [1.0], delta=1e-4))
        actions_region = solution.action_region()
        states = np.vstack([
            sample_in_ellipsoid(state_region, rng, 400), sample_on_ellipsoid_boundary(state_region, rng, 400)
        ])
        actions = np.vstack([
            sample_in_ellipsoid(actions_region, rng, 400), sample_on_ellipsoid_boundary(actions_region, rng, 400)
        ])
        residuals = small_relu_net.predict(np.hstack([states, actions])) - target
        forms = np.einsum("ij,jk,ik->i", residuals, solution.omega, residuals)
        assert forms.max() <= 1.0 + 1e-5
        assert solution.residual_bound().dim == 2

    def test_without_a_shift_adaptation_keeps_pi_star_tracking(self, surrogates):
        reference = sample_reference(AffineEnv(), zero_policy, 10)
        adapted = run_episode(AffineEnv(), surrogates, zero_policy, reference, delta=1e-4)
        unadapted = run_episode(AffineEnv(), surrogates, zero_policy, reference, mode="unadapted")
        assert adapted.records[0]["chosen"] == "pi_star"
        assert conic.OPTIMAL in {r["solver_status"] for r in adapted.records[1:]}
        assert unadapted.residuals().max() < 1e-12
        assert adapted.residuals().mean() <= unadapted.residuals().mean() + 1e-6

    def test_replanning_compensates_an_actuator_shift(self):
        shifted = ReluNetwork.affine(np.hstack([A, 2.0 * B[:, None]]), C)
        cov_net = ReluNetwork.affine(np.zeros((2, 3)), np.log([1e-6, 1e-6]))
        surrogates = SurrogatePair(shifted, cov_net)
        reference = sample_reference(AffineEnv(), damping_policy, 10)
        options = AdaptOptions(target="replan")
        planner = ClosedLoopPlanner(AffineEnv(), damping_policy)

        adapted = run_episode(
            AffineEnv(gain=2.0), surrogates, damping_policy, reference, options=options, planner=planner
        )
        unadapted = run_episode(AffineEnv(gain=2.0), surrogates, damping_policy, reference, mode="unadapted")
        assert any(r["chosen"] == "adapted" for r in adapted.records)
        assert adapted.residuals().mean() < 0.5 * unadapted.residuals().mean()

    def test_action_region_sits_on_the_trace_floor(self, small_relu_net, state_region):
        target = small_relu_net.forward([0.2, -0.1, 0.1])
        delta = 1e-4
        solution = solve_adaptation(AdaptProblem(small_relu_net, state_region, target, [-1.0], [1.0], delta=delta))
        spread = np.trace(solution.tau2 * np.linalg.inv(solution.U))
        assert delta * (1.0 - 1e-6) <= spread <= 10.0 * delta

    def test_scalar_action_needs_no_clipping(self, small_relu_net, state_region, rng):
        for _ in range(3):
            target = small_relu_net.forward(np.concatenate([state_region.center, rng.uniform(-3.0, 3.0, size=1)]))
            solution = solve_adaptation(AdaptProblem(small_relu_net, state_region, target, [-1.0], [1.0]))
            assert -1.0 - 1e-7 <= solution.pre_clip_action[0] <= 1.0 + 1e-7

    def test_action_shape_stays_under_the_cap(self, small_relu_net, state_region):
        target = small_relu_net.forward([0.2, -0.1, 0.1])
        problem = AdaptProblem(small_relu_net, state_region, target, [-1.0], [1.0], max_tightness=1e3)
        solution = solve_adaptation(problem)
        assert np.linalg.eigvalsh(solution.U)[-1] <= 1e3 * (1.0 + 1e-6)
