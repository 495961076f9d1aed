import numpy as np
import pytest

from shiftguard.environments import (
    ClosedLoopPlanner,
    Dataset,
    acc,
    collect_transitions,
    dubins,
    linear_car,
    make_env,
    make_pi_star,
    sample_reference,
)
from shiftguard.environments.policies import LqrTrackingPolicy, PiCruisePolicy, StanleyPolicy
from shiftguard.errors import DimensionMismatchError, DomainError


def test_dubins_zero_steering_drives_straight():
    params = dubins.TRAIN_PARAMS
    state = np.array([0.0, 0.0, 0.0, 1.0])
    for _ in range(10):
        state = dubins.dubins_step(state, 0.0, params)
    np.testing.assert_allclose(state, [10 * params.speed * params.dt, 0.0, 0.0, 1.0], atol=1e-12)


def test_dubins_heading_stays_on_unit_circle():
    state = np.array([0.0, 0.0, 0.0, 1.0])
    for _ in range(100):
        state = dubins.dubins_step(state, 0.5, dubins.DEPLOY_PARAMS)
        assert np.hypot(state[2], state[3]) == pytest.approx(1.0, abs=1e-12)


def test_dubins_steering_is_saturated():
    params = dubins.TRAIN_PARAMS
    state = np.array([0.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(
        dubins.dubins_step(state, 5.0, params), dubins.dubins_step(state, params.max_steering, params)
    )


def test_stanley_on_the_line_does_not_steer():
    policy = StanleyPolicy(dubins.PathSpec(kind="line"))
    np.testing.assert_allclose(policy(np.array([3.0, 0.0, 0.0, 1.0])), [0.0], atol=1e-12)
    assert policy(np.array([3.0, -1.0, 0.0, 1.0]))[0] > 0.0


def test_stanley_tracks_the_circle_on_training_dynamics():
    env = make_env("dubins", deployment=False)
    reference = sample_reference(env, make_pi_star(env), 300)
    offsets = [env.path.tracking_errors(x, y, np.arctan2(s, c))[0] for x, y, s, c in reference]
    assert max(abs(o) for o in offsets) < 0.5


def test_lqr_gain_stabilizes_training_model():
    policy = LqrTrackingPolicy()
    assert policy.spectral_radius() < 1.0
    u = policy(np.array([100.0, 0.0, 0.0]), 0)
    assert u.shape == (1,)
    assert abs(u[0]) <= linear_car.TRAIN_PARAMS.action_limit


def test_linear_step_adds_mean_noise_without_rng():
    params = linear_car.TRAIN_PARAMS
    nxt = linear_car.linear_step(np.zeros(3), [0.0], params)
    np.testing.assert_allclose(nxt, params.noise_mean)


def test_acc_gap_rule():
    params = acc.TRAIN_PARAMS
    assert acc.safe_distance(20.0, params) == pytest.approx(10.0 + 1.4 * 20.0)
    assert acc.target_speed(100.0, 20.0, 25.0, params) == params.set_speed
    assert acc.target_speed(20.0, 20.0, 25.0, params) == 25.0
    assert acc.target_speed(20.0, 20.0, 40.0, params) == params.set_speed


def test_acc_step_clips_command_and_advances_time():
    params = acc.TRAIN_PARAMS
    env = acc.AccEnv(params, deployment=False)
    state = env.default_state()
    high = acc.acc_step(state, [50.0], params)
    capped = acc.acc_step(state, [params.max_accel], params)
    np.testing.assert_allclose(high, capped)
    assert high[acc.TIME] == pytest.approx(params.dt)
    assert high[acc.A_EGO] == pytest.approx(params.max_accel * params.dt / params.lag)


def test_acc_observation_and_aux():
    env = make_env("acc", deployment=True)
    obs = env.reset()
    assert obs.shape == (3,)
    assert obs[1] == pytest.approx(acc.DEPLOY_PARAMS.set_speed - acc.DEPLOY_PARAMS.ego_speed0)
    assert env.aux()["d_rel"] == pytest.approx(acc.DEPLOY_PARAMS.lead_gap0)


def test_pi_cruise_accelerates_below_target():
    policy = PiCruisePolicy()
    assert policy(np.array([0.0, 5.0, 20.0]))[0] > 0.0
    assert policy(np.array([0.0, 100.0, 20.0]))[0] == acc.TRAIN_PARAMS.max_accel


def test_make_env_selects_parameters():
    assert make_env("linear_car", deployment=True).params == linear_car.DEPLOY_PARAMS
    assert make_env("linear_car", deployment=False).params == linear_car.TRAIN_PARAMS
    assert make_env("dubins", deployment=True, path=dubins.PathSpec(kind="line")).path.kind == "line"
    with pytest.raises(ValueError):
        make_env("boat", deployment=True)


def test_make_pi_star_matches_kind():
    assert isinstance(make_pi_star(make_env("dubins", False)), StanleyPolicy)
    assert isinstance(make_pi_star(make_env("linear_car", False)), LqrTrackingPolicy)
    assert isinstance(make_pi_star(make_env("acc", False)), PiCruisePolicy)


def test_environment_requires_reset():
    env = make_env("linear_car", deployment=True)
    with pytest.raises(RuntimeError):
        env.step([0.0])
    env.reset()
    with pytest.raises(DimensionMismatchError):
        env.step([0.0, 1.0])


def test_clone_with_seed_reproduces_noise():
    env = make_env("linear_car", deployment=True, seed=3)
    first, second = env.clone_with_seed(11), env.clone_with_seed(11)
    first.reset()
    second.reset()
    np.testing.assert_array_equal(first.step([1.0]), second.step([1.0]))


def test_sample_reference_shape_and_start():
    env = make_env("linear_car", deployment=False)
    reference = sample_reference(env, make_pi_star(env), 20)
    assert reference.shape == (21, 3)
    np.testing.assert_array_equal(reference[0], np.zeros(3))
    np.testing.assert_array_equal(reference, sample_reference(env, make_pi_star(env), 20))


def test_collect_transitions_count_and_box():
    env = make_env("acc", deployment=True)
    data = collect_transitions(env, make_pi_star(env), 123, np.random.default_rng(0), episode_length=20)
    assert len(data) == 123
    assert data.states.shape == (123, 3)
    assert np.all(data.actions >= env.lower) and np.all(data.actions <= env.upper)
    again = collect_transitions(env, make_pi_star(env), 123, np.random.default_rng(0), episode_length=20)
    np.testing.assert_array_equal(data.next_states, again.next_states)


def test_dataset_csv_round_trip(tmp_path, rng):
    data = Dataset(rng.normal(size=(5, 3)), rng.normal(size=(5, 1)), rng.normal(size=(5, 3)))
    assert data.header() == ["s_0", "s_1", "s_2", "a_0", "sp_0", "sp_1", "sp_2"]
    path = tmp_path / "models" / "dataset.csv"
    data.to_csv(path)
    loaded = Dataset.from_csv(path)
    np.testing.assert_array_equal(loaded.states, data.states)
    np.testing.assert_array_equal(loaded.next_states, data.next_states)


def test_dataset_split_and_validation(rng):
    data = Dataset(np.zeros((10, 2)), np.zeros((10, 1)), np.zeros((10, 2)))
    train, val = data.split(0.3, rng)
    assert (len(train), len(val)) == (7, 3)
    with pytest.raises(DimensionMismatchError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros((3, 2)))
    with pytest.raises(DomainError):
        data.split(0.0, rng)


def test_empty_dataset_is_rejected(tmp_path):
    with pytest.raises(DomainError):
        Dataset(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros((0, 2)))
    with pytest.raises(DomainError):
        Dataset([], [], [])

    header_only = tmp_path / "header_only.csv"
    header_only.write_text("s_0,s_1,a_0,sp_0,sp_1\n", encoding="utf-8")
    with pytest.raises(DomainError):
        Dataset.from_csv(header_only)

    blank = tmp_path / "blank.csv"
    blank.write_text("", encoding="utf-8")
    with pytest.raises(DomainError):
        Dataset.from_csv(blank)


@pytest.mark.parametrize("kind", ["linear_car", "dubins", "acc"])
def test_planner_reproduces_the_reference_from_reference_states(kind):
    env = make_env(kind, deployment=False)
    pi_star = make_pi_star(env)
    planner = ClosedLoopPlanner(env, pi_star)
    state = env.default_state()
    reference = sample_reference(env, pi_star, 5)
    for t in range(5):
        observation = env.observation(state)
        np.testing.assert_allclose(planner(state, observation, t), reference[t + 1], atol=1e-12)
        state = env.simulate(state, env.clip_action(pi_star(observation, t)))


def test_planner_replans_from_an_off_reference_state():
    env = make_env("linear_car", deployment=False)
    pi_star = make_pi_star(env)
    planner = ClosedLoopPlanner(env, pi_star)
    state = np.array([1.0, 1.5, -0.5])
    expected = linear_car.linear_step(state, pi_star(state, 3), linear_car.TRAIN_PARAMS)
    np.testing.assert_allclose(planner(state, state, 3), expected)
