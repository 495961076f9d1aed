import json
from types import SimpleNamespace

import numpy as np
import pytest

from shiftguard import relu_net
from shiftguard.environments import collect_transitions, make_env, make_pi_star
from shiftguard.environments.sampling import Dataset
from shiftguard.errors import (
    DimensionMismatchError,
    ModelFormatError,
    ModelVersionError,
    TrainingDivergedError,
    TrainingError,
)
from shiftguard.relu_net import ReluNetwork, TrainConfig


def numeric_gradient(f, theta, h=1e-6):
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        grad[i] = (f(theta + step) - f(theta - step)) / (2.0 * h)
    return grad


@pytest.fixture
def linear_data(rng):
    a = np.array([[0.9, 0.2, 0.5], [-0.1, 1.1, -0.3]])
    c = np.array([0.05, -0.2])
    states = rng.uniform(-1.0, 1.0, size=(200, 2))
    actions = rng.uniform(-1.0, 1.0, size=(200, 1))
    next_states = np.hstack([states, actions]) @ a.T + c
    return Dataset(states, actions, next_states), a, c


def test_forward_and_predict_agree(small_relu_net, rng):
    x = rng.normal(size=(6, 3))
    batched = small_relu_net.predict(x)
    for row, expected in zip(x, batched):
        np.testing.assert_allclose(small_relu_net.forward(row), expected)


def test_forward_capture_returns_hidden_stacks(small_relu_net):
    out, trace = small_relu_net.forward([0.1, -0.2, 0.3], capture=True)
    assert out.shape == (2,)
    assert trace.v.shape == (4,)
    np.testing.assert_allclose(trace.z, np.maximum(trace.v, 0.0))


def test_network_rejects_bad_shapes():
    with pytest.raises(DimensionMismatchError):
        ReluNetwork((2, 3), (np.zeros((2, 2)),), (np.zeros(3),))
    with pytest.raises(DimensionMismatchError):
        ReluNetwork((2,), (), ())
    with pytest.raises(ValueError):
        ReluNetwork((1, 1), (np.ones((1, 1)),), (np.zeros(1),), "sigmoid")


def test_wrong_input_width(small_relu_net):
    with pytest.raises(DimensionMismatchError):
        small_relu_net.forward([1.0, 2.0])


def test_weights_are_read_only(small_relu_net):
    with pytest.raises(ValueError):
        small_relu_net.weights[0][0, 0] = 1.0


def test_input_jacobian_matches_finite_differences(rng):
    net = ReluNetwork.random((3, 5, 4, 2), rng, "tanh")
    x = rng.normal(size=3)
    numeric = np.column_stack([
        (net.forward(x + h) - net.forward(x - h)) / 2e-6 for h in 1e-6 * np.eye(3)
    ])
    np.testing.assert_allclose(net.input_jacobian(x), numeric, atol=1e-6)


def test_flat_parameters_round_trip(small_relu_net):
    theta = small_relu_net.flat_parameters()
    assert theta.size == small_relu_net.parameter_count
    rebuilt = small_relu_net.with_flat_parameters(theta)
    for w, w2 in zip(small_relu_net.weights, rebuilt.weights):
        np.testing.assert_array_equal(w, w2)
    with pytest.raises(DimensionMismatchError):
        small_relu_net.with_flat_parameters(theta[:-1])


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_mean_gradient_matches_finite_differences(rng, activation):
    net = ReluNetwork.random((3, 6, 2), rng, activation)
    net = net.with_flat_parameters(net.flat_parameters() + 0.1 * rng.normal(size=net.parameter_count))
    x = rng.normal(size=(10, 3))
    y = rng.normal(size=(10, 2))
    _, grad = relu_net.mean_loss_and_grad(net, x, y)
    numeric = numeric_gradient(
        lambda th: relu_net.mean_loss_and_grad(net.with_flat_parameters(th), x, y)[0], net.flat_parameters()
    )
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)


def test_cov_gradient_matches_finite_differences(rng):
    net = ReluNetwork.random((3, 4, 2), rng, "tanh")
    x = rng.normal(size=(8, 3))
    squared = rng.uniform(0.0, 0.5, size=(8, 2))
    _, grad = relu_net.cov_loss_and_grad(net, x, squared)
    numeric = numeric_gradient(
        lambda th: relu_net.cov_loss_and_grad(net.with_flat_parameters(th), x, squared)[0], net.flat_parameters()
    )
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)


def test_joint_gradient_matches_finite_differences(rng):
    embedder = ReluNetwork.random((2, 4, 3), rng, "tanh")
    mean_net = ReluNetwork.random((4, 5, 2), rng, "tanh")
    s = rng.normal(size=(7, 2))
    a = rng.normal(size=(7, 1))
    y = rng.normal(size=(7, 2))
    split = embedder.parameter_count

    def loss(theta):
        return relu_net.joint_loss_and_grad(
            embedder.with_flat_parameters(theta[:split]), mean_net.with_flat_parameters(theta[split:]), s, a, y
        )[0]

    theta = np.concatenate([embedder.flat_parameters(), mean_net.flat_parameters()])
    _, grad = relu_net.joint_loss_and_grad(embedder, mean_net, s, a, y)
    np.testing.assert_allclose(grad, numeric_gradient(loss, theta), rtol=1e-4, atol=1e-6)


def test_affine_network_recovers_linear_dynamics(linear_data):
    data, a, c = linear_data
    cfg = TrainConfig(learning_rate=0.1, batch_size=len(data), epochs=1000, optimizer="sgd", validation_fraction=0.0)
    net, report = relu_net.train_mean(data, cfg, hidden_dims=())
    np.testing.assert_allclose(net.weights[0], a, atol=1e-4)
    np.testing.assert_allclose(net.biases[0], c, atol=1e-4)
    assert report.train_loss[report.best_epoch] < 1e-8
    assert all(v is None for v in report.val_loss)
    assert len(report.rows()) == cfg.epochs + 1


def test_training_is_deterministic_for_a_seed(linear_data):
    data, _, _ = linear_data
    cfg = TrainConfig(epochs=3, seed=7)
    first, _ = relu_net.train_mean(data, cfg, hidden_dims=(4,))
    second, _ = relu_net.train_mean(data, cfg, hidden_dims=(4,))
    np.testing.assert_array_equal(first.flat_parameters(), second.flat_parameters())


def test_validation_split_is_reported(linear_data):
    data, _, _ = linear_data
    _, report = relu_net.train_mean(data, TrainConfig(epochs=2, validation_fraction=0.25), hidden_dims=(4,))
    assert all(v is not None and np.isfinite(v) for v in report.val_loss)


def test_divergence_raises_with_context(linear_data):
    data, _, _ = linear_data
    cfg = TrainConfig(
        learning_rate=1e6, batch_size=len(data), epochs=200, optimizer="sgd", validation_fraction=0.0, warm_start=False
    )
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDivergedError) as info:
            relu_net.train_mean(data, cfg, hidden_dims=())
    assert info.value.epoch >= 1
    assert info.value.learning_rate == 1e6


def test_warm_start_fits_affine_data_exactly(linear_data):
    data, _, _ = linear_data
    net = ReluNetwork.random((3, 6, 2), np.random.default_rng(0), "relu")
    inputs = np.hstack([data.states, data.actions])
    warm = relu_net._warm_start(net, inputs, data.next_states)
    hidden = inputs @ warm.weights[0].T + warm.biases[0]
    assert hidden.min() > 0.0
    np.testing.assert_allclose(warm.predict(inputs), data.next_states, atol=1e-8)


def test_cosine_rate_decays_to_the_final_fraction():
    cfg = TrainConfig(learning_rate=1e-2, epochs=11, final_lr_fraction=0.1)
    assert relu_net._cosine_rate(cfg, 1) == pytest.approx(1e-2)
    assert relu_net._cosine_rate(cfg, 6) == pytest.approx(0.55e-2)
    assert relu_net._cosine_rate(cfg, 11) == pytest.approx(1e-3)
    assert relu_net._cosine_rate(TrainConfig(learning_rate=1e-2), 50) == 1e-2


def test_linear_car_surrogate_matches_noise_free_dynamics():
    env = make_env("linear_car", deployment=True)
    data = collect_transitions(env, make_pi_star(env), 2000, np.random.default_rng(3))
    cfg = TrainConfig(learning_rate=1e-4, epochs=20, final_lr_fraction=0.01, validation_fraction=0.1)
    net, _ = relu_net.train_mean(data, cfg, hidden_dims=(10, 5))

    held_out = collect_transitions(env, make_pi_star(env), 300, np.random.default_rng(4))
    truth = np.array([env.simulate(s, a) for s, a in zip(held_out.states, held_out.actions)])
    rmse = np.sqrt(np.mean((net.predict(np.hstack([held_out.states, held_out.actions])) - truth) ** 2))
    assert rmse <= 5e-3


def test_empty_data_is_rejected():
    empty = SimpleNamespace(states=np.zeros((0, 2)), actions=np.zeros((0, 1)), next_states=np.zeros((0, 2)))
    with pytest.raises(TrainingError):
        relu_net.train_mean(empty, TrainConfig(epochs=1))


def test_cov_network_learns_noise_level(rng):
    states = rng.uniform(-1.0, 1.0, size=(400, 2))
    actions = rng.uniform(-1.0, 1.0, size=(400, 1))
    next_states = states + 0.1 * rng.normal(size=states.shape)
    data = Dataset(states, actions, next_states)
    identity = ReluNetwork.affine(np.hstack([np.eye(2), np.zeros((2, 1))]), np.zeros(2))
    cov_net, _ = relu_net.train_cov(data, identity, TrainConfig(epochs=5, learning_rate=1e-3), hidden_dims=(4,))
    variances = np.exp(cov_net.predict(np.hstack([states, actions])))
    assert 0.005 < variances.mean() < 0.02


def test_joint_training_checks_dimensions(linear_data):
    data, _, _ = linear_data
    with pytest.raises(DimensionMismatchError):
        relu_net.train_joint_embedded(data, (3, 4), (5, 2), TrainConfig(epochs=1))
    with pytest.raises(DimensionMismatchError):
        relu_net.train_joint_embedded(data, (2, 4), (4, 2), TrainConfig(epochs=1))


def test_joint_training_returns_matching_pair(linear_data):
    data, _, _ = linear_data
    embedder, mean_net, report = relu_net.train_joint_embedded(data, (2, 3), (4, 6, 2), TrainConfig(epochs=2))
    assert embedder.hidden_activation == "tanh"
    assert mean_net.input_dim == embedder.output_dim + 1
    assert report.network == "embedded_mean"


def test_save_and_load(tmp_path, small_relu_net):
    path = tmp_path / "models" / "net.json"
    relu_net.save(small_relu_net, path)
    loaded = relu_net.load(path)
    assert loaded.layer_dims == small_relu_net.layer_dims
    np.testing.assert_array_equal(loaded.flat_parameters(), small_relu_net.flat_parameters())


def test_load_rejects_other_versions(tmp_path, small_relu_net):
    document = small_relu_net.to_document()
    document["format_version"] = 2
    path = tmp_path / "net.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ModelVersionError) as info:
        relu_net.load(path)
    assert info.value.version == 2


def test_load_rejects_malformed_files(tmp_path, small_relu_net):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ModelFormatError):
        relu_net.load(broken)

    document = small_relu_net.to_document()
    document["weights"][0] = [[1.0]]
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ModelFormatError):
        relu_net.load(wrong)
