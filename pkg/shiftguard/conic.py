"""
Conic Program Representation and Solver Backend.

A small, immutable description of semidefinite programs with a log-determinant
objective, a builder for assembling them, a solver contract with one reference
implementation delegating to cvxpy, and an independent constraint checker that
never trusts solver-reported feasibility.
"""

import logging
import os
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from shiftguard.errors import ConfigError, DimensionMismatchError, SolverError

logger = logging.getLogger(__name__)

SOLVER_TOL_ENV = "SHIFTGUARD_SOLVER_TOL"

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical_failure"

VERIFY_TOL = 1e-6

Value = Union[float, np.ndarray]


class SolverSettings(BaseModel):
    """
    Tolerances and iteration cap handed to the conic backend.

    The SHIFTGUARD_SOLVER_TOL environment variable, when set, overrides both
    tolerances every time settings are built.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    feasibility_tol: float = Field(default=1e-8, gt=0.0)
    gap_tol: float = Field(default=1e-8, gt=0.0)
    max_iterations: int = Field(default=200, gt=0)
    backend: Literal["CLARABEL", "SCS"] = "CLARABEL"
    verbose: bool = False

    @model_validator(mode="before")
    @classmethod
    def apply_environment_override(cls, data: Any) -> Any:
        raw = os.environ.get(SOLVER_TOL_ENV)
        if raw is None or not isinstance(data, dict):
            return data
        try:
            tol = float(raw)
        except ValueError:
            raise ConfigError(f"{SOLVER_TOL_ENV} must be a positive number, got {raw!r}")
        if not np.isfinite(tol) or tol <= 0.0:
            raise ConfigError(f"{SOLVER_TOL_ENV} must be a positive number, got {raw!r}")
        return {**data, "feasibility_tol": tol, "gap_tol": tol}


def _symmetric(matrix, name: str) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatchError(f"{name} must be square, got shape {matrix.shape}")
    return 0.5 * (matrix + matrix.T)


@dataclass(frozen=True)
class ScalarVariable:
    name: str
    lower: Optional[float] = None
    upper: Optional[float] = None


@dataclass(frozen=True)
class MatrixVariable:
    """Symmetric matrix decision variable of size ``dim``."""

    name: str
    dim: int


@dataclass(frozen=True, eq=False)
class MatrixExpression:
    """
    Affine symmetric matrix expression.

    constant + sum_k coeff_k * x_k + sum_j c_j * L_j X_j L_j^T, with scalar
    variables x_k and symmetric matrix variables X_j. Symmetric by construction.
    """

    constant: np.ndarray
    scalar_terms: Tuple[Tuple[str, np.ndarray], ...] = ()
    congruence_terms: Tuple[Tuple[str, np.ndarray, float], ...] = ()

    @classmethod
    def zeros(cls, dim: int) -> "MatrixExpression":
        return cls(np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.constant.shape[0]

    def plus_constant(self, matrix) -> "MatrixExpression":
        matrix = _symmetric(matrix, "constant")
        self._check_dim(matrix.shape[0])
        return MatrixExpression(self.constant + matrix, self.scalar_terms, self.congruence_terms)

    def plus_scalar(self, variable: str, coefficient) -> "MatrixExpression":
        coefficient = _symmetric(coefficient, f"coefficient of {variable}")
        self._check_dim(coefficient.shape[0])
        return MatrixExpression(
            self.constant,
            self.scalar_terms + ((variable, coefficient),),
            self.congruence_terms,
        )

    def plus_congruence(
        self, variable: str, left, coefficient: float = 1.0
    ) -> "MatrixExpression":
        left = np.atleast_2d(np.asarray(left, dtype=float))
        self._check_dim(left.shape[0])
        return MatrixExpression(
            self.constant,
            self.scalar_terms,
            self.congruence_terms + ((variable, left, float(coefficient)),),
        )

    def scaled(self, factor: float) -> "MatrixExpression":
        return MatrixExpression(
            factor * self.constant,
            tuple((name, factor * coeff) for name, coeff in self.scalar_terms),
            tuple((name, left, factor * c) for name, left, c in self.congruence_terms),
        )

    def evaluate(self, values: Dict[str, Value]) -> np.ndarray:
        total = np.array(self.constant, dtype=float)
        for name, coeff in self.scalar_terms:
            total = total + float(values[name]) * coeff
        for name, left, c in self.congruence_terms:
            total = total + c * left @ np.asarray(values[name]) @ left.T
        return 0.5 * (total + total.T)

    def _check_dim(self, dim: int):
        if dim != self.dim:
            raise DimensionMismatchError(
                f"matrix term of size {dim} added to expression of size {self.dim}"
            )


@dataclass(frozen=True, eq=False)
class LinearExpression:
    """constant + sum_k a_k x_k + sum_j <M_j, X_j>."""

    constant: float = 0.0
    scalar_terms: Tuple[Tuple[str, float], ...] = ()
    trace_terms: Tuple[Tuple[str, np.ndarray], ...] = ()

    def plus_scalar(self, variable: str, coefficient: float) -> "LinearExpression":
        return LinearExpression(
            self.constant,
            self.scalar_terms + ((variable, float(coefficient)),),
            self.trace_terms,
        )

    def plus_trace(self, variable: str, weight) -> "LinearExpression":
        return LinearExpression(
            self.constant,
            self.scalar_terms,
            self.trace_terms + ((variable, _symmetric(weight, f"weight of {variable}")),),
        )

    def plus_constant(self, value: float) -> "LinearExpression":
        return LinearExpression(self.constant + float(value), self.scalar_terms, self.trace_terms)

    def evaluate(self, values: Dict[str, Value]) -> float:
        total = self.constant
        for name, a in self.scalar_terms:
            total += a * float(values[name])
        for name, weight in self.trace_terms:
            total += float(np.sum(weight * np.asarray(values[name])))
        return float(total)

    def magnitude(self, values: Dict[str, Value]) -> float:
        """Sum of absolute term values, used to scale violations."""
        total = abs(self.constant)
        for name, a in self.scalar_terms:
            total += abs(a * float(values[name]))
        for name, weight in self.trace_terms:
            total += abs(float(np.sum(weight * np.asarray(values[name]))))
        return total


@dataclass(frozen=True, eq=False)
class Constraint:
    """
    One named constraint.

    kind "psd" means expression is positive semidefinite, "eq" means the linear
    expression equals zero and "ineq" means it is nonnegative.
    """

    name: str
    kind: Literal["psd", "eq", "ineq"]
    expression: Union[MatrixExpression, LinearExpression]


@dataclass(frozen=True, eq=False)
class ConicProgram:
    """
    Immutable conic program.

    Maximizes sum_k w_k logdet(X_k) + linear objective subject to the constraints
    and the scalar variable bounds.
    """

    scalars: Tuple[ScalarVariable, ...]
    matrices: Tuple[MatrixVariable, ...]
    constraints: Tuple[Constraint, ...]
    logdet_terms: Tuple[Tuple[str, float], ...]
    linear_objective: LinearExpression

    def scaled_constraints(self, factor: float) -> "ConicProgram":
        """Copy with every constraint expression multiplied by ``factor`` > 0."""
        scaled = []
        for c in self.constraints:
            if isinstance(c.expression, MatrixExpression):
                expr = c.expression.scaled(factor)
            else:
                expr = LinearExpression(
                    factor * c.expression.constant,
                    tuple((n, factor * a) for n, a in c.expression.scalar_terms),
                    tuple((n, factor * w) for n, w in c.expression.trace_terms),
                )
            scaled.append(Constraint(c.name, c.kind, expr))
        return ConicProgram(
            self.scalars, self.matrices, tuple(scaled), self.logdet_terms, self.linear_objective
        )


class ProgramBuilder:
    """Mutable builder that checks every referenced variable is declared."""

    def __init__(self):
        self._scalars: Dict[str, ScalarVariable] = {}
        self._matrices: Dict[str, MatrixVariable] = {}
        self._constraints: List[Constraint] = []
        self._logdet: List[Tuple[str, float]] = []
        self._linear = LinearExpression()

    def scalar(
        self, name: str, lower: Optional[float] = None, upper: Optional[float] = None
    ) -> str:
        self._check_new(name)
        self._scalars[name] = ScalarVariable(name, lower, upper)
        return name

    def matrix(self, name: str, dim: int) -> str:
        self._check_new(name)
        if dim < 1:
            raise DimensionMismatchError(f"matrix variable {name} needs dim >= 1, got {dim}")
        self._matrices[name] = MatrixVariable(name, int(dim))
        return name

    def require_psd(self, name: str, expression: MatrixExpression):
        for variable, _ in expression.scalar_terms:
            self._check_scalar(variable)
        for variable, left, _ in expression.congruence_terms:
            self._check_matrix(variable)
            if left.shape[1] != self._matrices[variable].dim:
                raise DimensionMismatchError(
                    f"congruence factor of shape {left.shape} does not fit {variable}"
                )
        self._constraints.append(Constraint(name, "psd", expression))

    def require_equal(self, name: str, expression: LinearExpression):
        self._check_linear(expression)
        self._constraints.append(Constraint(name, "eq", expression))

    def require_nonnegative(self, name: str, expression: LinearExpression):
        self._check_linear(expression)
        self._constraints.append(Constraint(name, "ineq", expression))

    def maximize_logdet(self, variable: str, weight: float = 1.0):
        self._check_matrix(variable)
        self._logdet.append((variable, float(weight)))

    def maximize_linear(self, expression: LinearExpression):
        self._check_linear(expression)
        self._linear = expression

    def build(self) -> ConicProgram:
        return ConicProgram(
            tuple(self._scalars.values()),
            tuple(self._matrices.values()),
            tuple(self._constraints),
            tuple(self._logdet),
            self._linear,
        )

    def _check_new(self, name: str):
        if name in self._scalars or name in self._matrices:
            raise ValueError(f"variable {name!r} declared twice")

    def _check_scalar(self, name: str):
        if name not in self._scalars:
            raise KeyError(f"undeclared scalar variable {name!r}")

    def _check_matrix(self, name: str):
        if name not in self._matrices:
            raise KeyError(f"undeclared matrix variable {name!r}")

    def _check_linear(self, expression: LinearExpression):
        for variable, _ in expression.scalar_terms:
            self._check_scalar(variable)
        for variable, weight in expression.trace_terms:
            self._check_matrix(variable)
            if weight.shape[0] != self._matrices[variable].dim:
                raise DimensionMismatchError(f"trace weight does not fit {variable}")


@dataclass
class SolverResult:
    """Outcome of a solve. ``values`` is present iff ``status`` is optimal."""

    status: str
    values: Optional[Dict[str, Value]]
    objective: Optional[float]
    solve_time_s: float
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class VerificationEntry:
    name: str
    kind: str
    violation: float


@dataclass
class VerificationReport:
    passed: bool
    worst_psd_violation: float
    worst_linear_violation: float
    entries: List[VerificationEntry]


def verify(result: SolverResult, program: ConicProgram, tol: float = VERIFY_TOL) -> VerificationReport:
    """
    Independently re-check every constraint of ``program`` at the result's values.

    PSD violations are the negative part of the smallest eigenvalue relative to
    max(1, spectral norm); linear violations are relative to max(1, term size).

    Args:
        result: Optimal solver result
        program: The program that was solved
        tol: Pass threshold on every relative violation

    Returns:
        Per-constraint verification report
    """
    if result.values is None:
        return VerificationReport(False, float("inf"), float("inf"), [])
    values = result.values
    entries: List[VerificationEntry] = []

    for c in program.constraints:
        if c.kind == "psd":
            matrix = c.expression.evaluate(values)
            eigvals = np.linalg.eigvalsh(matrix)
            scale = max(1.0, float(np.max(np.abs(eigvals))))
            entries.append(VerificationEntry(c.name, "psd", max(0.0, -eigvals[0]) / scale))
        else:
            value = c.expression.evaluate(values)
            scale = max(1.0, c.expression.magnitude(values))
            raw = abs(value) if c.kind == "eq" else max(0.0, -value)
            entries.append(VerificationEntry(c.name, c.kind, raw / scale))

    for s in program.scalars:
        x = float(values[s.name])
        if s.lower is not None:
            entries.append(VerificationEntry(f"{s.name}>=lower", "ineq", max(0.0, s.lower - x) / max(1.0, abs(s.lower))))
        if s.upper is not None:
            entries.append(VerificationEntry(f"{s.name}<=upper", "ineq", max(0.0, x - s.upper) / max(1.0, abs(s.upper))))

    for name, _ in program.logdet_terms:
        smallest = float(np.linalg.eigvalsh(np.asarray(values[name]))[0])
        entries.append(VerificationEntry(f"logdet:{name}", "psd", 0.0 if smallest > 0.0 else 1.0))

    psd = [e.violation for e in entries if e.kind == "psd"]
    linear = [e.violation for e in entries if e.kind != "psd"]
    worst_psd = max(psd, default=0.0)
    worst_linear = max(linear, default=0.0)
    return VerificationReport(
        passed=worst_psd <= tol and worst_linear <= tol,
        worst_psd_violation=worst_psd,
        worst_linear_violation=worst_linear,
        entries=entries,
    )


class ConicSolver(ABC):
    """
    Solver contract. Implementations must not keep mutable state between
    solve calls so they can be invoked from concurrent workers.
    """

    @abstractmethod
    def solve(self, program: ConicProgram, settings: Optional[SolverSettings] = None) -> SolverResult:
        """Solve ``program`` and report one of the four statuses."""


class CvxpySolver(ConicSolver):
    """Reference backend: translates the program into cvxpy and runs CLARABEL or SCS."""

    def solve(self, program: ConicProgram, settings: Optional[SolverSettings] = None) -> SolverResult:
        import cvxpy as cp

        settings = settings or SolverSettings()
        start = time.perf_counter()

        variables: Dict[str, Any] = {}
        constraints = []
        for s in program.scalars:
            var = cp.Variable(name=s.name)
            variables[s.name] = var
            if s.lower is not None:
                constraints.append(var >= s.lower)
            if s.upper is not None:
                constraints.append(var <= s.upper)
        for mvar in program.matrices:
            variables[mvar.name] = cp.Variable((mvar.dim, mvar.dim), symmetric=True, name=mvar.name)

        for c in program.constraints:
            if c.kind == "psd":
                expr = self._matrix_expression(cp, c.expression, variables)
                slack = cp.Variable((c.expression.dim, c.expression.dim), symmetric=True)
                constraints.append(slack == 0.5 * (expr + expr.T))
                constraints.append(slack >> 0)
            elif c.kind == "eq":
                constraints.append(self._linear_expression(cp, c.expression, variables) == 0)
            else:
                constraints.append(self._linear_expression(cp, c.expression, variables) >= 0)

        objective = self._linear_expression(cp, program.linear_objective, variables)
        for name, weight in program.logdet_terms:
            objective = objective + weight * cp.log_det(variables[name])
        problem = cp.Problem(cp.Maximize(objective), constraints)

        backend = settings.backend
        if backend not in cp.installed_solvers():
            fallback = "SCS" if backend == "CLARABEL" else "CLARABEL"
            logger.warning(f"Conic backend {backend} not installed, using {fallback}")
            backend = fallback
        options = self._backend_options(backend, settings)

        try:
            problem.solve(solver=backend, verbose=settings.verbose, **options)
        except cp.SolverError as e:
            elapsed = time.perf_counter() - start
            logger.error(f"Conic backend {backend} failed: {str(e)}")
            return SolverResult(
                NUMERICAL_FAILURE, None, None, elapsed,
                {"backend": backend, "message": str(e)},
            )
        elapsed = time.perf_counter() - start

        diagnostics = {"backend": backend, "backend_status": problem.status}
        stats = problem.solver_stats
        if stats is not None:
            diagnostics["iterations"] = stats.num_iters
            diagnostics["backend_solve_time_s"] = stats.solve_time

        status = problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return SolverResult(INFEASIBLE, None, None, elapsed, diagnostics)
        if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            return SolverResult(UNBOUNDED, None, None, elapsed, diagnostics)
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            return SolverResult(NUMERICAL_FAILURE, None, None, elapsed, diagnostics)

        values: Dict[str, Value] = {}
        for s in program.scalars:
            values[s.name] = float(variables[s.name].value)
        for mvar in program.matrices:
            matrix = np.asarray(variables[mvar.name].value, dtype=float)
            values[mvar.name] = 0.5 * (matrix + matrix.T)
        result = SolverResult(OPTIMAL, values, float(problem.value), elapsed, diagnostics)

        if status == cp.OPTIMAL_INACCURATE:
            report = verify(result, program, VERIFY_TOL)
            if not report.passed:
                logger.warning(
                    f"Inaccurate solution rejected (psd violation {report.worst_psd_violation:.2e}, "
                    f"linear violation {report.worst_linear_violation:.2e})"
                )
                diagnostics["worst_psd_violation"] = report.worst_psd_violation
                diagnostics["worst_linear_violation"] = report.worst_linear_violation
                return SolverResult(NUMERICAL_FAILURE, None, None, elapsed, diagnostics)
        return result

    @staticmethod
    def _backend_options(backend: str, settings: SolverSettings) -> Dict[str, Any]:
        if backend == "CLARABEL":
            return {
                "tol_feas": settings.feasibility_tol,
                "tol_gap_rel": settings.gap_tol,
                "tol_gap_abs": settings.gap_tol,
                "max_iter": settings.max_iterations,
            }
        return {
            "eps_abs": settings.feasibility_tol,
            "eps_rel": settings.gap_tol,
            "max_iters": max(settings.max_iterations, 2500),
        }

    @staticmethod
    def _matrix_expression(cp, expression: MatrixExpression, variables: Dict[str, Any]):
        expr = cp.Constant(expression.constant)
        for name, coeff in expression.scalar_terms:
            expr = expr + variables[name] * coeff
        for name, left, c in expression.congruence_terms:
            expr = expr + c * (left @ variables[name] @ left.T)
        return expr

    @staticmethod
    def _linear_expression(cp, expression: LinearExpression, variables: Dict[str, Any]):
        expr = cp.Constant(expression.constant)
        for name, a in expression.scalar_terms:
            expr = expr + a * variables[name]
        for name, weight in expression.trace_terms:
            expr = expr + cp.trace(weight @ variables[name])
        return expr


def default_solver() -> ConicSolver:
    return CvxpySolver()


def solve(program: ConicProgram, settings: Optional[SolverSettings] = None,
          solver: Optional[ConicSolver] = None) -> SolverResult:
    """
    Solve ``program`` with ``solver`` (the cvxpy backend by default).

    Raises:
        SolverError: Never for solver statuses; only if the backend itself
            cannot be imported
    """
    try:
        backend = solver or default_solver()
        result = backend.solve(program, settings)
    except ImportError as e:
        logger.error(f"Conic backend unavailable: {str(e)}")
        raise SolverError(f"conic backend unavailable: {str(e)}")
    logger.debug(f"Conic solve finished: status={result.status}, time={result.solve_time_s:.4f}s")
    return result
