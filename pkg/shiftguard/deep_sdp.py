"""
Quadratic-Constraint Matrices and Residual Reach-Set Bounds.

Assembles, over the base vector z = [s; a; x; 1] (x = stacked hidden
post-activations), the symmetric matrices describing the state region, the
action region, the ReLU activations and the output residual, and solves the
log-determinant program that bounds the residual reach set of a ReLU network
by an ellipsoid centred at the origin.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from shiftguard import conic
from shiftguard.conic import ConicSolver, MatrixExpression, ProgramBuilder, SolverSettings
from shiftguard.errors import (
    CertificationError,
    DimensionMismatchError,
    IllConditionedCovarianceError,
    NotReluNetworkError,
    SolverError,
)
from shiftguard.gaussian import Ellipsoid, as_vector
from shiftguard.relu_net import ReluNetwork

logger = logging.getLogger(__name__)

MULTIPLIER_TOL = 1e-8


@dataclass(frozen=True)
class BaseVectorLayout:
    """Index ranges of the s, a, x blocks and the trailing constant 1 of z."""

    n: int
    m: int
    neuron_counts: Tuple[int, ...]

    @property
    def hidden_neurons(self) -> int:
        return int(sum(self.neuron_counts))

    @property
    def size(self) -> int:
        return self.n + self.m + self.hidden_neurons + 1

    @property
    def state(self) -> slice:
        return slice(0, self.n)

    @property
    def action(self) -> slice:
        return slice(self.n, self.n + self.m)

    @property
    def x(self) -> slice:
        return slice(self.n + self.m, self.n + self.m + self.hidden_neurons)

    @property
    def const(self) -> int:
        return self.size - 1

    def layer(self, i: int) -> slice:
        """Slice of the x block holding hidden layer ``i`` (0-based)."""
        start = self.n + self.m + int(sum(self.neuron_counts[:i]))
        return slice(start, start + self.neuron_counts[i])

    def compose(self, s, a, x) -> np.ndarray:
        return np.concatenate([as_vector(s), as_vector(a), np.asarray(x, dtype=float).reshape(-1), [1.0]])


def build_layout(net: ReluNetwork, n: int, m: int) -> BaseVectorLayout:
    """
    Base-vector layout for ``net`` with state dim ``n`` and action dim ``m``.

    Raises:
        DimensionMismatchError: If the network input is not n + m wide
    """
    if net.input_dim != n + m:
        raise DimensionMismatchError(f"network input {net.input_dim} != n + m = {n + m}")
    return BaseVectorLayout(int(n), int(m), tuple(net.hidden_dims))


@dataclass(frozen=True, eq=False)
class QCMultipliers:
    """
    Per-neuron activation multipliers.

    lam is free, nu and eta are nonnegative. xi (pre-activation box) and
    kappa (chord or exactness for stable neurons) are only used together with
    interval bounds.
    """

    lam: np.ndarray
    nu: np.ndarray
    eta: np.ndarray
    xi: Optional[np.ndarray] = None
    kappa: Optional[np.ndarray] = None

    def __post_init__(self):
        count = np.asarray(self.lam, dtype=float).reshape(-1).size
        for name in ("lam", "nu", "eta", "xi", "kappa"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=float).reshape(-1)
            if value.size != count:
                raise DimensionMismatchError(f"multiplier {name} has {value.size} entries, expected {count}")
            if name != "lam" and np.any(value < -MULTIPLIER_TOL):
                raise ValueError(f"multiplier {name} must be nonnegative")
            object.__setattr__(self, name, value)

    @classmethod
    def zeros(cls, count: int, with_bounds: bool = False) -> "QCMultipliers":
        extra = np.zeros(count) if with_bounds else None
        return cls(np.zeros(count), np.zeros(count), np.zeros(count), extra, extra)

    @property
    def count(self) -> int:
        return self.lam.size


@dataclass
class IntervalBounds:
    """Pre-activation bounds per hidden layer and bounds on the network output."""

    lower: List[np.ndarray]
    upper: List[np.ndarray]
    output_lower: np.ndarray
    output_upper: np.ndarray

    @property
    def stacked_lower(self) -> np.ndarray:
        return np.concatenate(self.lower) if self.lower else np.zeros(0)

    @property
    def stacked_upper(self) -> np.ndarray:
        return np.concatenate(self.upper) if self.upper else np.zeros(0)


@dataclass
class MatrixSet:
    """Matrices of one residual-bound instance over the base vector."""

    M_state: np.ndarray
    M_action: np.ndarray
    M_phi: np.ndarray
    M_out: np.ndarray
    E1: np.ndarray
    E2: np.ndarray
    E3: np.ndarray
    C: np.ndarray
    b: np.ndarray


@dataclass
class PhiTerm:
    """One multiplier's contribution matrix to M_phi."""

    kind: str
    neuron: int
    matrix: np.ndarray


def require_relu(net: ReluNetwork):
    if not net.is_relu:
        raise NotReluNetworkError(
            f"semidefinite relaxation needs ReLU hidden layers, got {net.hidden_activation}"
        )


def selector_matrices(layout: BaseVectorLayout) -> Tuple[np.ndarray, np.ndarray]:
    """E1 with E1 z = [s; 1] and E2 with E2 z = [a; 1]."""
    e1 = np.zeros((layout.n + 1, layout.size))
    e1[:layout.n, layout.state] = np.eye(layout.n)
    e1[layout.n, layout.const] = 1.0
    e2 = np.zeros((layout.m + 1, layout.size))
    e2[:layout.m, layout.action] = np.eye(layout.m)
    e2[layout.m, layout.const] = 1.0
    return e1, e2


def constant_selector(layout: BaseVectorLayout) -> np.ndarray:
    e = np.zeros(layout.size)
    e[layout.const] = 1.0
    return e


def pre_activation_map(net: ReluNetwork, layout: BaseVectorLayout) -> np.ndarray:
    """Matrix P with v = P z for the stacked hidden pre-activations v."""
    p = np.zeros((layout.hidden_neurons, layout.size))
    row = 0
    for i, count in enumerate(layout.neuron_counts):
        w, b = net.weights[i], net.biases[i]
        rows = slice(row, row + count)
        if i == 0:
            p[rows, :layout.n + layout.m] = w
        else:
            p[rows, layout.layer(i - 1)] = w
        p[rows, layout.const] = b
        row += count
    return p


def post_activation_map(layout: BaseVectorLayout) -> np.ndarray:
    """Matrix X with X z = x."""
    x = np.zeros((layout.hidden_neurons, layout.size))
    x[:, layout.x] = np.eye(layout.hidden_neurons)
    return x


def output_map(net: ReluNetwork, target, layout: BaseVectorLayout) -> np.ndarray:
    """
    [C b] as one matrix G with G z = net(s, a) - target.

    C holds the output weights on the last hidden block (or on [s; a] for an
    affine network) and b = b_out - target sits in the constant column.
    """
    target = as_vector(target, "target")
    if target.size != net.output_dim:
        raise DimensionMismatchError(f"target has {target.size} entries, network outputs {net.output_dim}")
    g = np.zeros((net.output_dim, layout.size))
    if layout.neuron_counts:
        g[:, layout.layer(len(layout.neuron_counts) - 1)] = net.weights[-1]
    else:
        g[:, :layout.n + layout.m] = net.weights[-1]
    g[:, layout.const] = net.biases[-1] - target
    return g


def region_block(center, shape) -> np.ndarray:
    """
    [[-P^-1, P^-1 c], [c^T P^-1, 1 - c^T P^-1 c]], whose form is >= 0 exactly on E(c, P).

    Raises:
        IllConditionedCovarianceError: If the shape matrix is not positive definite
    """
    center = as_vector(center, "center")
    shape = np.atleast_2d(np.asarray(shape, dtype=float))
    try:
        factor = np.linalg.cholesky(0.5 * (shape + shape.T))
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(0.5 * (shape + shape.T))[0])
        raise IllConditionedCovarianceError("region shape is singular", eigenvalue=smallest)
    inverse = np.linalg.inv(factor)
    precision = inverse.T @ inverse
    k = center.size
    block = np.zeros((k + 1, k + 1))
    block[:k, :k] = -precision
    block[:k, k] = precision @ center
    block[k, :k] = precision @ center
    block[k, k] = 1.0 - center @ precision @ center
    return block


def build_M_state(mu, sigma, rho: float, layout: BaseVectorLayout) -> np.ndarray:
    """
    (1/rho) E1^T [[-S^-1, S^-1 mu], [mu^T S^-1, -mu^T S^-1 mu + rho]] E1.

    Its form is nonnegative exactly when s lies in E(mu, rho * sigma).
    """
    mu = as_vector(mu, "mu")
    if mu.size != layout.n:
        raise DimensionMismatchError(f"mu has {mu.size} entries, state dim is {layout.n}")
    e1, _ = selector_matrices(layout)
    block = region_block(mu, rho * np.asarray(sigma, dtype=float))
    return e1.T @ block @ e1


def build_M_action(mu_a, omega_a, layout: BaseVectorLayout) -> np.ndarray:
    """E2^T [[-W^-1, W^-1 mu], [mu^T W^-1, 1 - mu^T W^-1 mu]] E2 for the action region E(mu, W)."""
    mu_a = as_vector(mu_a, "mu_a")
    if mu_a.size != layout.m:
        raise DimensionMismatchError(f"mu_a has {mu_a.size} entries, action dim is {layout.m}")
    _, e2 = selector_matrices(layout)
    return e2.T @ region_block(mu_a, omega_a) @ e2


def activation_embedding(net: ReluNetwork, layout: BaseVectorLayout) -> np.ndarray:
    """E3 with E3 z = [v; x; 1]."""
    return np.vstack([
        pre_activation_map(net, layout),
        post_activation_map(layout),
        constant_selector(layout)[None, :],
    ])


def _add_symmetric(q: np.ndarray, i: int, j: int, value: float):
    q[i, j] += value
    if i != j:
        q[j, i] += value


def phi_terms(
    net: ReluNetwork,
    layout: BaseVectorLayout,
    bounds: Optional[IntervalBounds] = None,
) -> List[PhiTerm]:
    """
    Unit-multiplier matrices of every activation constraint in base coordinates.

    Over w = [v; z; 1] each neuron j contributes
      lam:   z_j v_j - z_j^2            (= 0 for ReLU)
      nu:    z_j - v_j                  (>= 0)
      eta:   z_j                        (>= 0)
    and, when interval bounds l <= v <= u are given,
      xi:    (v_j - l_j)(u_j - v_j)     (>= 0)
      kappa: z_j (u_j (v_j - l_j) - (u_j - l_j) z_j) for unstable neurons,
             -(z_j - v_j)^2 for active ones and -z_j^2 for inactive ones.
    Each Q is conjugated by E3 into base-vector coordinates.
    """
    require_relu(net)
    count = layout.hidden_neurons
    size = 2 * count + 1
    one = 2 * count
    e3 = activation_embedding(net, layout)
    lower = bounds.stacked_lower if bounds is not None else None
    upper = bounds.stacked_upper if bounds is not None else None

    terms: List[PhiTerm] = []

    def emit(kind: str, j: int, q: np.ndarray):
        terms.append(PhiTerm(kind, j, e3.T @ q @ e3))

    for j in range(count):
        v, z = j, count + j

        q = np.zeros((size, size))
        _add_symmetric(q, v, z, 0.5)
        q[z, z] -= 1.0
        emit("lam", j, q)

        q = np.zeros((size, size))
        _add_symmetric(q, z, one, 0.5)
        _add_symmetric(q, v, one, -0.5)
        emit("nu", j, q)

        q = np.zeros((size, size))
        _add_symmetric(q, z, one, 0.5)
        emit("eta", j, q)

        if bounds is None:
            continue
        lo, hi = float(lower[j]), float(upper[j])

        q = np.zeros((size, size))
        q[v, v] -= 1.0
        _add_symmetric(q, v, one, 0.5 * (hi + lo))
        q[one, one] -= lo * hi
        emit("xi", j, q)

        q = np.zeros((size, size))
        if lo < 0.0 < hi:
            _add_symmetric(q, z, v, 0.5 * hi)
            _add_symmetric(q, z, one, -0.5 * hi * lo)
            q[z, z] -= hi - lo
        elif lo >= 0.0:
            q[z, z] -= 1.0
            q[v, v] -= 1.0
            _add_symmetric(q, z, v, 1.0)
        else:
            q[z, z] -= 1.0
        emit("kappa", j, q)
    return terms


def build_M_phi(
    net: ReluNetwork,
    mult: QCMultipliers,
    layout: BaseVectorLayout,
    bounds: Optional[IntervalBounds] = None,
) -> np.ndarray:
    """Activation constraint matrix M_phi, linear in the multipliers."""
    if mult.count != layout.hidden_neurons:
        raise DimensionMismatchError(
            f"{mult.count} multipliers given for {layout.hidden_neurons} hidden neurons"
        )
    if bounds is None and (mult.xi is not None or mult.kappa is not None):
        raise ValueError("xi and kappa multipliers need interval bounds")
    total = np.zeros((layout.size, layout.size))
    for term in phi_terms(net, layout, bounds):
        weights = getattr(mult, term.kind)
        if weights is not None:
            total += weights[term.neuron] * term.matrix
    return total


def build_M_out(net: ReluNetwork, target, omega, layout: BaseVectorLayout) -> np.ndarray:
    """
    G^T (-Omega) G + e e^T, whose form equals 1 - r^T Omega r with r = net(s, a) - target.
    """
    g = output_map(net, target, layout)
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    if omega.shape != (g.shape[0], g.shape[0]):
        raise DimensionMismatchError(f"Omega must be {g.shape[0]}x{g.shape[0]}, got {omega.shape}")
    e = constant_selector(layout)
    return -g.T @ omega @ g + np.outer(e, e)


def build_matrix_set(
    net: ReluNetwork,
    state_region: Ellipsoid,
    action_region: Ellipsoid,
    target,
    omega,
    mult: QCMultipliers,
) -> MatrixSet:
    """All matrices of one instance, mostly useful for inspection and tests."""
    layout = build_layout(net, state_region.dim, action_region.dim)
    e1, e2 = selector_matrices(layout)
    g = output_map(net, target, layout)
    return MatrixSet(
        M_state=e1.T @ region_block(state_region.center, state_region.shape) @ e1,
        M_action=build_M_action(action_region.center, action_region.shape, layout),
        M_phi=build_M_phi(net, mult, layout),
        M_out=build_M_out(net, target, omega, layout),
        E1=e1,
        E2=e2,
        E3=activation_embedding(net, layout),
        C=g[:, :-1],
        b=g[:, -1],
    )


def fold_input_map(net: ReluNetwork, transform, offset) -> ReluNetwork:
    """Network x_hat -> net(offset + transform @ x_hat), folded into the first layer."""
    transform = np.atleast_2d(np.asarray(transform, dtype=float))
    offset = as_vector(offset, "offset")
    w1 = net.weights[0]
    weights = (w1 @ transform,) + net.weights[1:]
    biases = (net.biases[0] + w1 @ offset,) + net.biases[1:]
    dims = (transform.shape[1],) + net.layer_dims[1:]
    return ReluNetwork(dims, weights, biases, net.hidden_activation)


def _support_radius(rows: np.ndarray, shape: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", rows, shape, rows), 0.0))


def interval_bounds(net: ReluNetwork, state_region: Ellipsoid, action_region: Ellipsoid) -> IntervalBounds:
    """
    Pre-activation and output bounds over the product of the two regions.

    The first layer is exact (ellipsoid support functions); deeper layers use
    interval arithmetic.
    """
    n = state_region.dim
    if net.input_dim != n + action_region.dim:
        raise DimensionMismatchError("regions do not match the network input")
    w1 = net.weights[0]
    mid = w1 @ np.concatenate([state_region.center, action_region.center]) + net.biases[0]
    radius = _support_radius(w1[:, :n], state_region.shape) + _support_radius(w1[:, n:], action_region.shape)
    lo, hi = mid - radius, mid + radius

    lowers, uppers = [], []
    for w, b in zip(net.weights[1:], net.biases[1:]):
        lowers.append(lo)
        uppers.append(hi)
        post_lo, post_hi = net.activate(lo), net.activate(hi)
        centre = w @ (0.5 * (post_lo + post_hi)) + b
        spread = np.abs(w) @ (0.5 * (post_hi - post_lo))
        lo, hi = centre - spread, centre + spread
    return IntervalBounds(lowers, uppers, lo, hi)


class FixedActionOptions(BaseModel):
    """Options of the fixed-action residual bound."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    use_interval_bounds: bool = False
    max_tightness: float = Field(default=1e6, gt=0.0)
    solver: SolverSettings = Field(default_factory=SolverSettings)


@dataclass
class ResidualBound:
    """Certified ellipsoid E(0, Omega^-1) containing every reachable residual."""

    ellipsoid: Ellipsoid
    omega: np.ndarray
    log_det_shape: float
    multipliers: QCMultipliers
    tau_state: float
    tau_action: float
    solve_time_s: float
    status: str = conic.OPTIMAL


def add_multiplier_variables(
    builder: ProgramBuilder, terms: Sequence[PhiTerm], lmi: MatrixExpression
) -> MatrixExpression:
    """Declare one scalar per PhiTerm and subtract its matrix from ``lmi``."""
    for term in terms:
        name = f"{term.kind}_{term.neuron}"
        builder.scalar(name, lower=None if term.kind == "lam" else 0.0)
        lmi = lmi.plus_scalar(name, -term.matrix)
    return lmi


def multipliers_from_values(values, count: int, with_bounds: bool) -> QCMultipliers:
    def collect(kind: str, free: bool = False) -> np.ndarray:
        raw = np.array([float(values[f"{kind}_{j}"]) for j in range(count)])
        return raw if free else np.maximum(raw, 0.0)

    return QCMultipliers(
        collect("lam", free=True),
        collect("nu"),
        collect("eta"),
        collect("xi") if with_bounds else None,
        collect("kappa") if with_bounds else None,
    )


def check_status(result: conic.SolverResult, what: str):
    """
    Raises:
        CertificationError: On infeasible or unbounded programs
        SolverError: On numerical failure
    """
    if result.status in (conic.INFEASIBLE, conic.UNBOUNDED):
        logger.error(f"{what}: program {result.status}")
        raise CertificationError(f"{what}: program {result.status}", result.status, result.diagnostics)
    if result.status != conic.OPTIMAL:
        logger.error(f"{what}: solver failed with {result.diagnostics}")
        raise SolverError(f"{what}: solver status {result.status}", result.diagnostics)


def bound_residual_fixed_action(
    net: ReluNetwork,
    state_region: Ellipsoid,
    action_region: Ellipsoid,
    target,
    options: Optional[FixedActionOptions] = None,
    solver: Optional[ConicSolver] = None,
) -> ResidualBound:
    """
    Minimum-volume ellipsoid E(0, Omega_R) containing net(s, a) - target over both regions.

    Both regions are mapped to unit balls by folding their centres and square
    roots into the first layer, and the residual is divided by its largest
    interval-bound magnitude sigma before solving
      max logdet(Omega~)
      s.t. M_out(Omega~) - tau_s M_s - tau_a M_a - M_phi(lam, nu, eta) >= 0,
           Omega~ <= max_tightness * I,
    after which Omega = Omega~ / sigma^2.

    Args:
        net: ReLU network on [s, a]
        state_region: Ellipsoid of states
        action_region: Ellipsoid of actions
        target: Reference next state
        options: Interval bounds, tightness cap and solver settings
        solver: Conic backend (cvxpy by default)

    Returns:
        The certified residual bound

    Raises:
        NotReluNetworkError: If the hidden layers are not ReLU
        CertificationError: If the program is infeasible or unbounded
        SolverError: If the backend fails numerically
    """
    options = options or FixedActionOptions()
    require_relu(net)
    n, m = state_region.dim, action_region.dim
    layout = build_layout(net, n, m)
    target = as_vector(target, "target")

    transform = np.zeros((n + m, n + m))
    transform[:n, :n] = state_region.root
    transform[n:, n:] = action_region.root
    offset = np.concatenate([state_region.center, action_region.center])
    normalized = fold_input_map(net, transform, offset)
    unit_state = Ellipsoid(np.zeros(n), np.eye(n))
    unit_action = Ellipsoid(np.zeros(m), np.eye(m))

    bounds = interval_bounds(normalized, unit_state, unit_action)
    sigma = float(np.max(np.abs(np.concatenate([bounds.output_lower - target, bounds.output_upper - target]))))
    if not np.isfinite(sigma) or sigma <= 0.0:
        sigma = 1.0
    g = output_map(normalized, target, layout) / sigma
    e1, e2 = selector_matrices(layout)
    e = constant_selector(layout)
    k = net.output_dim

    builder = ProgramBuilder()
    builder.matrix("omega", k)
    builder.scalar("tau_state", lower=0.0)
    builder.scalar("tau_action", lower=0.0)
    lmi = (
        MatrixExpression.zeros(layout.size)
        .plus_constant(np.outer(e, e))
        .plus_congruence("omega", g.T, -1.0)
        .plus_scalar("tau_state", -(e1.T @ region_block(unit_state.center, unit_state.shape) @ e1))
        .plus_scalar("tau_action", -(e2.T @ region_block(unit_action.center, unit_action.shape) @ e2))
    )
    terms = phi_terms(normalized, layout, bounds if options.use_interval_bounds else None)
    lmi = add_multiplier_variables(builder, terms, lmi)
    builder.require_psd("residual_lmi", lmi)
    builder.require_psd(
        "tightness_cap",
        MatrixExpression.zeros(k).plus_constant(options.max_tightness * np.eye(k)).plus_congruence("omega", np.eye(k), -1.0),
    )
    builder.maximize_logdet("omega")

    result = conic.solve(builder.build(), options.solver, solver)
    check_status(result, "residual bound")

    omega = np.asarray(result.values["omega"]) / sigma ** 2
    omega = 0.5 * (omega + omega.T)
    if np.linalg.eigvalsh(omega)[0] <= 0.0:
        raise SolverError("residual bound: Omega is not positive definite", result.diagnostics)
    shape = np.linalg.inv(omega)
    _, logdet_omega = np.linalg.slogdet(omega)
    bound = ResidualBound(
        ellipsoid=Ellipsoid(np.zeros(k), 0.5 * (shape + shape.T)),
        omega=omega,
        log_det_shape=float(-logdet_omega),
        multipliers=multipliers_from_values(result.values, layout.hidden_neurons, options.use_interval_bounds),
        tau_state=float(result.values["tau_state"]),
        tau_action=float(result.values["tau_action"]),
        solve_time_s=result.solve_time_s,
    )
    logger.info(
        f"Certified residual bound: logdet shape {bound.log_det_shape:.4f}, "
        f"solve {1000.0 * bound.solve_time_s:.1f} ms"
    )
    return bound
