"""
Feed-Forward Surrogate Networks.

Definition, evaluation, backpropagation training and JSON serialization of the
layered affine + activation networks used as dynamics surrogates: the mean
network, the diagonal log-variance network, the state embedder and the deep
comparison network.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from shiftguard.errors import (
    DimensionMismatchError,
    ModelFormatError,
    ModelVersionError,
    TrainingDivergedError,
    TrainingError,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")
MIN_VARIANCE = 1e-30


class TransitionData(Protocol):
    """Anything holding aligned (s, a, s') arrays of shape (N, n), (N, m), (N, n)."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray


@dataclass
class ForwardTrace:
    """Pre-activations v and post-activations z of every hidden layer."""

    pre_activations: List[np.ndarray]
    post_activations: List[np.ndarray]

    @property
    def v(self) -> np.ndarray:
        return np.concatenate(self.pre_activations) if self.pre_activations else np.zeros(0)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate(self.post_activations) if self.post_activations else np.zeros(0)


def _frozen(array) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ReluNetwork:
    """
    Layered map x -> W_L act(... act(W_1 x + b_1) ...) + b_L.

    Hidden layers use ``hidden_activation`` (relu or tanh); the output layer is
    affine. ``weights[i]`` has shape (layer_dims[i+1], layer_dims[i]).
    """

    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    hidden_activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise DimensionMismatchError(f"layer_dims must hold >= 2 positive sizes, got {dims}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {ACTIVATIONS}, got {self.hidden_activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionMismatchError(
                f"{len(dims) - 1} layers expected, got {len(self.weights)} weights and {len(self.biases)} biases"
            )
        weights, biases = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.atleast_2d(np.asarray(w, dtype=float))
            b = np.atleast_1d(np.asarray(b, dtype=float))
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise DimensionMismatchError(
                    f"layer {i}: expected weight {(dims[i + 1], dims[i])} and bias {(dims[i + 1],)}, "
                    f"got {w.shape} and {b.shape}"
                )
            weights.append(_frozen(w))
            biases.append(_frozen(b))
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", tuple(biases))

    @classmethod
    def random(
        cls,
        layer_dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
    ) -> "ReluNetwork":
        """He-scaled (relu) or Glorot-scaled (tanh) Gaussian weights with zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            if hidden_activation == "relu":
                std = np.sqrt(2.0 / fan_in)
            else:
                std = np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(layer_dims), tuple(weights), tuple(biases), hidden_activation)

    @classmethod
    def affine(cls, weight, bias) -> "ReluNetwork":
        """Network without hidden layers computing ``weight @ x + bias``."""
        weight = np.atleast_2d(np.asarray(weight, dtype=float))
        return cls((weight.shape[1], weight.shape[0]), (weight,), (np.asarray(bias, dtype=float),))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def hidden_dims(self) -> Tuple[int, ...]:
        return self.layer_dims[1:-1]

    @property
    def hidden_neurons(self) -> int:
        return int(sum(self.hidden_dims))

    @property
    def is_relu(self) -> bool:
        return self.hidden_activation == "relu" or not self.hidden_dims

    def activate(self, v: np.ndarray) -> np.ndarray:
        if self.hidden_activation == "relu":
            return np.maximum(v, 0.0)
        return np.tanh(v)

    def activation_slope(self, v: np.ndarray) -> np.ndarray:
        if self.hidden_activation == "relu":
            return (v > 0.0).astype(float)
        return 1.0 - np.tanh(v) ** 2

    def _check_input(self, width: int):
        if width != self.input_dim:
            raise DimensionMismatchError(
                f"network expects input dimension {self.input_dim}, got {width}"
            )

    def forward(self, x, capture: bool = False) -> Union[np.ndarray, Tuple[np.ndarray, ForwardTrace]]:
        """
        Evaluate the network at one input.

        Args:
            x: Input vector of size input_dim
            capture: Also return the hidden pre/post-activation stacks

        Returns:
            Output vector, or (output, ForwardTrace) when ``capture`` is set
        """
        h = np.atleast_1d(np.asarray(x, dtype=float))
        self._check_input(h.size)
        trace = ForwardTrace([], [])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            v = w @ h + b
            if i == last:
                return (v, trace) if capture else v
            h = self.activate(v)
            trace.pre_activations.append(v)
            trace.post_activations.append(h)

    def predict(self, inputs) -> np.ndarray:
        """Batched evaluation of a (k, input_dim) array."""
        h = np.atleast_2d(np.asarray(inputs, dtype=float))
        self._check_input(h.shape[1])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i != last:
                h = self.activate(h)
        return h

    def input_jacobian(self, x) -> np.ndarray:
        """Jacobian d output / d input at ``x`` (shape output_dim x input_dim)."""
        _, trace = self.forward(x, capture=True)
        jacobian = self.weights[0]
        for v, w in zip(trace.pre_activations, self.weights[1:]):
            jacobian = w @ (self.activation_slope(v)[:, None] * jacobian)
        return jacobian

    def flat_parameters(self) -> np.ndarray:
        """All weights (row-major) then bias, layer by layer."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @property
    def parameter_count(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def with_flat_parameters(self, theta) -> "ReluNetwork":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.parameter_count:
            raise DimensionMismatchError(
                f"expected {self.parameter_count} parameters, got {theta.size}"
            )
        weights, biases, offset = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(theta[offset:offset + w.size].reshape(w.shape))
            offset += w.size
            biases.append(theta[offset:offset + b.size])
            offset += b.size
        return ReluNetwork(self.layer_dims, tuple(weights), tuple(biases), self.hidden_activation)

    def to_document(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "layer_dims": list(self.layer_dims),
            "hidden_activation": self.hidden_activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }


# ---------------------------------------------------------------------------
# Backpropagation
# ---------------------------------------------------------------------------


def _forward_cache(net: ReluNetwork, inputs: np.ndarray):
    layer_inputs, pre_activations = [], []
    h = inputs
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        layer_inputs.append(h)
        v = h @ w.T + b
        if i == last:
            return v, layer_inputs, pre_activations
        pre_activations.append(v)
        h = net.activate(v)


def _backward(net: ReluNetwork, layer_inputs, pre_activations, grad_out: np.ndarray):
    """Gradients w.r.t. flat parameters and w.r.t. the batch inputs."""
    grads_w: List[np.ndarray] = [None] * len(net.weights)
    grads_b: List[np.ndarray] = [None] * len(net.weights)
    delta = grad_out
    for i in range(len(net.weights) - 1, -1, -1):
        grads_w[i] = delta.T @ layer_inputs[i]
        grads_b[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i]
        if i > 0:
            delta = delta * net.activation_slope(pre_activations[i - 1])
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)])
    return flat, delta


def mean_loss_and_grad(net: ReluNetwork, inputs, targets) -> Tuple[float, np.ndarray]:
    """
    Empirical mean of ||net(x) - y||^2 and its gradient w.r.t. flat parameters.

    Args:
        net: Network to evaluate
        inputs: (N, input_dim) array
        targets: (N, output_dim) array

    Returns:
        Tuple of (loss, gradient)
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    out, layer_inputs, pre = _forward_cache(net, inputs)
    error = out - targets
    count = inputs.shape[0]
    loss = float(np.sum(error ** 2) / count)
    grad, _ = _backward(net, layer_inputs, pre, 2.0 * error / count)
    return loss, grad


def cov_loss_and_grad(net: ReluNetwork, inputs, squared_residuals) -> Tuple[float, np.ndarray]:
    """Mean of (exp(g) - e^2)^2 over samples and coordinates, g = log-variance output."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    squared_residuals = np.atleast_2d(np.asarray(squared_residuals, dtype=float))
    out, layer_inputs, pre = _forward_cache(net, inputs)
    variance = np.exp(out)
    error = variance - squared_residuals
    count = error.size
    loss = float(np.sum(error ** 2) / count)
    grad, _ = _backward(net, layer_inputs, pre, 2.0 * error * variance / count)
    return loss, grad


def joint_loss_and_grad(
    embedder: ReluNetwork, mean_net: ReluNetwork, states, actions, targets
) -> Tuple[float, np.ndarray]:
    """
    Mean of ||mean_net([embedder(s), a]) - s'||^2 with the gradient over both networks.

    The gradient is the embedder's flat gradient followed by the mean network's.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    embedded, emb_inputs, emb_pre = _forward_cache(embedder, states)
    joined = np.hstack([embedded, actions])
    out, mean_inputs, mean_pre = _forward_cache(mean_net, joined)
    error = out - targets
    count = states.shape[0]
    loss = float(np.sum(error ** 2) / count)
    mean_grad, grad_joined = _backward(mean_net, mean_inputs, mean_pre, 2.0 * error / count)
    emb_grad, _ = _backward(embedder, emb_inputs, emb_pre, grad_joined[:, :embedder.output_dim])
    return loss, np.concatenate([emb_grad, mean_grad])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TrainConfig(BaseModel):
    """Mini-batch training hyper-parameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=64, gt=0)
    epochs: int = Field(default=200, gt=0)
    seed: int = Field(default=0, ge=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    validation_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    final_lr_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    warm_start: bool = True


@dataclass
class TrainReport:
    """Per-epoch losses; epoch 0 holds the losses of the initial parameters."""

    network: str
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[Optional[float]] = field(default_factory=list)
    best_epoch: int = 0

    def rows(self) -> List[dict]:
        return [
            {"network": self.network, "epoch": epoch, "train_loss": train, "val_loss": val}
            for epoch, (train, val) in enumerate(zip(self.train_loss, self.val_loss))
        ]


class _Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.learning_rate * grad


class _Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


Objective = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


def _split_indices(count: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(count)
    n_val = int(np.floor(fraction * count))
    if n_val >= count:
        n_val = count - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _cosine_rate(cfg: TrainConfig, epoch: int) -> float:
    """Cosine decay from the learning rate at epoch 1 to final_lr_fraction of it at the last epoch."""
    if cfg.final_lr_fraction == 1.0 or cfg.epochs == 1:
        return cfg.learning_rate
    progress = (epoch - 1) / (cfg.epochs - 1)
    floor = cfg.final_lr_fraction
    return cfg.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * progress)))


def _warm_start(net: ReluNetwork, inputs: np.ndarray, targets: np.ndarray, margin: float = 1e-3) -> ReluNetwork:
    """
    Least-squares output layer on top of the random hidden layers.

    For relu networks the hidden biases are first raised until every unit is
    active on ``inputs``, so the network starts as the best affine fit of the
    data and the descent only has to add the curvature.
    """
    weights, biases = list(net.weights), [np.array(b) for b in net.biases]
    h = inputs
    for i in range(len(weights) - 1):
        v = h @ weights[i].T + biases[i]
        if net.hidden_activation == "relu":
            shift = np.maximum(0.0, -v.min(axis=0)) + margin
            biases[i] = biases[i] + shift
            v = v + shift
        h = net.activate(v)
    design = np.hstack([h, np.ones((h.shape[0], 1))])
    solution, *_ = np.linalg.lstsq(design, targets, rcond=None)
    weights[-1] = solution[:-1].T
    biases[-1] = solution[-1]
    return ReluNetwork(net.layer_dims, tuple(weights), tuple(biases), net.hidden_activation)


def _optimize(
    name: str,
    theta: np.ndarray,
    objective: Objective,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, TrainReport]:
    optimizer = _Sgd(cfg.learning_rate) if cfg.optimizer == "sgd" else _Adam(cfg.learning_rate)
    report = TrainReport(network=name)

    def evaluate(params: np.ndarray) -> Tuple[float, Optional[float]]:
        train = objective(params, train_idx)[0]
        val = objective(params, val_idx)[0] if val_idx.size else None
        return train, val

    train_loss, val_loss = evaluate(theta)
    if not np.isfinite(train_loss):
        raise TrainingDivergedError(
            f"{name}: initial loss is not finite", epoch=0, last_finite_loss=None,
            learning_rate=cfg.learning_rate,
        )
    report.train_loss.append(train_loss)
    report.val_loss.append(val_loss)
    best_theta, best_loss = theta.copy(), train_loss
    last_finite = train_loss

    for epoch in range(1, cfg.epochs + 1):
        optimizer.learning_rate = _cosine_rate(cfg, epoch)
        shuffled = rng.permutation(train_idx)
        for start in range(0, shuffled.size, cfg.batch_size):
            batch = shuffled[start:start + cfg.batch_size]
            loss, grad = objective(theta, batch)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                logger.error(f"{name}: training diverged at epoch {epoch}")
                raise TrainingDivergedError(
                    f"{name}: loss became non-finite at epoch {epoch}",
                    epoch=epoch, last_finite_loss=last_finite, learning_rate=optimizer.learning_rate,
                )
            theta = optimizer.step(theta, grad)

        train_loss, val_loss = evaluate(theta)
        if not np.isfinite(train_loss):
            logger.error(f"{name}: training diverged at epoch {epoch}")
            raise TrainingDivergedError(
                f"{name}: loss became non-finite at epoch {epoch}",
                epoch=epoch, last_finite_loss=last_finite, learning_rate=optimizer.learning_rate,
            )
        last_finite = train_loss
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if train_loss < best_loss:
            best_theta, best_loss = theta.copy(), train_loss
            report.best_epoch = epoch

    logger.info(
        f"Trained {name}: initial loss {report.train_loss[0]:.4e}, "
        f"best loss {best_loss:.4e} at epoch {report.best_epoch}"
    )
    return best_theta, report


def _check_data(data: TransitionData) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    states = np.atleast_2d(np.asarray(data.states, dtype=float))
    actions = np.atleast_2d(np.asarray(data.actions, dtype=float))
    next_states = np.atleast_2d(np.asarray(data.next_states, dtype=float))
    if states.size == 0 or states.shape[0] == 0:
        raise TrainingError("training data is empty")
    if not (states.shape[0] == actions.shape[0] == next_states.shape[0]):
        raise DimensionMismatchError("states, actions and next_states have different lengths")
    if states.shape[1] != next_states.shape[1]:
        raise DimensionMismatchError("states and next_states have different widths")
    return states, actions, next_states


def train_mean(
    data: TransitionData,
    cfg: TrainConfig,
    hidden_dims: Sequence[int] = (8,),
    hidden_activation: str = "relu",
    name: str = "mean",
) -> Tuple[ReluNetwork, TrainReport]:
    """
    Fit the mean surrogate s' ~ net([s, a]) by minimizing the mean squared error.

    Args:
        data: Transitions (s, a, s')
        cfg: Training configuration
        hidden_dims: Hidden layer widths (empty for an affine network)
        hidden_activation: relu for the certified surrogate, tanh for the deep one
        name: Label used in the training report

    Returns:
        Tuple of (best network by training loss, report)

    Raises:
        TrainingError: If data is empty
        TrainingDivergedError: If the loss becomes non-finite
    """
    states, actions, next_states = _check_data(data)
    rng = np.random.default_rng(cfg.seed)
    inputs = np.hstack([states, actions])
    dims = (inputs.shape[1], *hidden_dims, next_states.shape[1])
    net = ReluNetwork.random(dims, rng, hidden_activation)
    train_idx, val_idx = _split_indices(inputs.shape[0], cfg.validation_fraction, rng)
    if cfg.warm_start:
        net = _warm_start(net, inputs[train_idx], next_states[train_idx])

    def objective(theta, idx):
        return mean_loss_and_grad(net.with_flat_parameters(theta), inputs[idx], next_states[idx])

    theta, report = _optimize(name, net.flat_parameters(), objective, train_idx, val_idx, cfg, rng)
    return net.with_flat_parameters(theta), report


def train_deep(
    data: TransitionData, cfg: TrainConfig, hidden_dims: Sequence[int] = (16,) * 7
) -> Tuple[ReluNetwork, TrainReport]:
    """Fit the tanh comparison surrogate used by the precautionary action check."""
    return train_mean(data, cfg, hidden_dims, hidden_activation="tanh", name="deep")


def train_cov(
    data: TransitionData,
    mean_net: ReluNetwork,
    cfg: TrainConfig,
    hidden_dims: Sequence[int] = (8,),
    embedder: Optional[ReluNetwork] = None,
) -> Tuple[ReluNetwork, TrainReport]:
    """
    Fit the diagonal log-variance network on the mean network's squared residuals.

    The output bias starts at log(mean squared residual) per coordinate.

    Args:
        data: Transitions (s, a, s')
        mean_net: Trained mean surrogate
        cfg: Training configuration
        hidden_dims: Hidden layer widths
        embedder: Embedder the mean network was trained behind, if any

    Returns:
        Tuple of (best network by training loss, report)
    """
    states, actions, next_states = _check_data(data)
    features = embedder.predict(states) if embedder is not None else states
    predicted = mean_net.predict(np.hstack([features, actions]))
    squared = (next_states - predicted) ** 2
    inputs = np.hstack([states, actions])

    rng = np.random.default_rng(cfg.seed)
    dims = (inputs.shape[1], *hidden_dims, next_states.shape[1])
    net = ReluNetwork.random(dims, rng, "relu")
    start_bias = np.log(np.maximum(squared.mean(axis=0), MIN_VARIANCE))
    biases = list(net.biases)
    biases[-1] = start_bias
    weights = list(net.weights)
    weights[-1] = 0.01 * weights[-1]
    net = ReluNetwork(net.layer_dims, tuple(weights), tuple(biases), "relu")
    train_idx, val_idx = _split_indices(inputs.shape[0], cfg.validation_fraction, rng)

    def objective(theta, idx):
        return cov_loss_and_grad(net.with_flat_parameters(theta), inputs[idx], squared[idx])

    theta, report = _optimize("cov", net.flat_parameters(), objective, train_idx, val_idx, cfg, rng)
    return net.with_flat_parameters(theta), report


def train_joint_embedded(
    data: TransitionData,
    dims_embedder: Sequence[int],
    dims_mean: Sequence[int],
    cfg: TrainConfig,
) -> Tuple[ReluNetwork, ReluNetwork, TrainReport]:
    """
    Jointly fit a tanh embedder and a ReLU mean network behind it.

    Args:
        data: Transitions (s, a, s')
        dims_embedder: Embedder layer sizes, first = state dim n, last = n'
        dims_mean: Mean network layer sizes, first = n' + m, last = n
        cfg: Training configuration

    Returns:
        Tuple of (embedder, mean network, report)
    """
    states, actions, next_states = _check_data(data)
    if dims_embedder[0] != states.shape[1]:
        raise DimensionMismatchError(f"embedder input {dims_embedder[0]} != state dim {states.shape[1]}")
    if dims_mean[0] != dims_embedder[-1] + actions.shape[1]:
        raise DimensionMismatchError(
            f"mean network input {dims_mean[0]} != embedding {dims_embedder[-1]} + action {actions.shape[1]}"
        )
    if dims_mean[-1] != next_states.shape[1]:
        raise DimensionMismatchError(f"mean network output {dims_mean[-1]} != state dim {next_states.shape[1]}")

    rng = np.random.default_rng(cfg.seed)
    embedder = ReluNetwork.random(dims_embedder, rng, "tanh")
    mean_net = ReluNetwork.random(dims_mean, rng, "relu")
    split = embedder.parameter_count
    train_idx, val_idx = _split_indices(states.shape[0], cfg.validation_fraction, rng)

    def objective(theta, idx):
        return joint_loss_and_grad(
            embedder.with_flat_parameters(theta[:split]),
            mean_net.with_flat_parameters(theta[split:]),
            states[idx], actions[idx], next_states[idx],
        )

    theta0 = np.concatenate([embedder.flat_parameters(), mean_net.flat_parameters()])
    theta, report = _optimize("embedded_mean", theta0, objective, train_idx, val_idx, cfg, rng)
    return (
        embedder.with_flat_parameters(theta[:split]),
        mean_net.with_flat_parameters(theta[split:]),
        report,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


class NetworkDocument(BaseModel):
    """Validated shape of a model JSON file."""

    model_config = ConfigDict(extra="forbid")

    format_version: int
    layer_dims: List[int]
    hidden_activation: Literal["relu", "tanh"]
    weights: List[List[List[float]]]
    biases: List[List[float]]


def network_from_document(document) -> ReluNetwork:
    """
    Build a network from a decoded model document.

    Raises:
        ModelVersionError: If format_version is not supported
        ModelFormatError: If the document is malformed
    """
    if not isinstance(document, dict):
        raise ModelFormatError("model document must be a JSON object")
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model format_version {version!r}", version=version)
    try:
        parsed = NetworkDocument.model_validate(document)
        return ReluNetwork(
            tuple(parsed.layer_dims),
            tuple(np.array(w, dtype=float) for w in parsed.weights),
            tuple(np.array(b, dtype=float) for b in parsed.biases),
            parsed.hidden_activation,
        )
    except (ValidationError, DimensionMismatchError, ValueError) as e:
        raise ModelFormatError(f"invalid model document: {str(e)}")


def save(net: ReluNetwork, path: Union[str, Path]):
    """Write ``net`` as a versioned UTF-8 JSON document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(net.to_document()), encoding="utf-8")
    logger.info(f"Saved network {list(net.layer_dims)} to {path}")


def load(path: Union[str, Path]) -> ReluNetwork:
    """
    Read a network written by :func:`save`.

    Raises:
        ModelFormatError: If the file is not valid JSON or not a valid network
        ModelVersionError: If format_version is not supported
    """
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        logger.error(f"Cannot parse model file {path}: {str(e)}")
        raise ModelFormatError(f"cannot parse model file {path}: {str(e)}")
    return network_from_document(document)
