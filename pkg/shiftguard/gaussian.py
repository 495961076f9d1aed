"""
Gaussian Distributions and Ellipsoid Geometry.

Chi-square confidence radii, Gaussian confidence ellipsoids and the ellipsoid
helpers (membership, sampling, affine images, volume) that every confidence
region and reach-set bound in the toolkit is expressed with.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import linalg, optimize, special

from shiftguard.errors import (
    DimensionMismatchError,
    DomainError,
    IllConditionedCovarianceError,
    InvalidDistributionError,
)

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-12
PSD_RTOL = 1e-12
SINGULAR_RTOL = 1e-12
REGULARIZATION_SCALE = 1e-9


def as_vector(value, name: str = "vector") -> np.ndarray:
    """Coerce ``value`` to a 1-D float array."""
    array = np.atleast_1d(np.asarray(value, dtype=float))
    if array.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {array.shape}")
    return array


def _as_square(value, size: int, name: str) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(value, dtype=float))
    if matrix.shape != (size, size):
        raise DimensionMismatchError(
            f"{name} must have shape {(size, size)}, got {matrix.shape}"
        )
    scale = max(float(np.max(np.abs(matrix))), np.finfo(float).tiny)
    if float(np.max(np.abs(matrix - matrix.T))) > SYMMETRY_RTOL * scale:
        raise InvalidDistributionError(f"{name} is not symmetric")
    return 0.5 * (matrix + matrix.T)


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """
    Symmetric square root of a positive-semidefinite matrix.

    Args:
        matrix: Symmetric PSD matrix

    Returns:
        Symmetric R with R @ R == matrix (negative round-off eigenvalues clipped)
    """
    eigvals, eigvecs = np.linalg.eigh(matrix)
    roots = np.sqrt(np.clip(eigvals, 0.0, None))
    return (eigvecs * roots) @ eigvecs.T


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Multivariate normal N(mean, cov) with a PSD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = as_vector(self.mean, "mean")
        cov = _as_square(self.cov, mean.size, "cov")
        eigvals = np.linalg.eigvalsh(cov)
        if eigvals[0] < -PSD_RTOL * max(eigvals[-1], 0.0):
            raise InvalidDistributionError(
                f"cov is not positive semidefinite (smallest eigenvalue {eigvals[0]:.3e})"
            )
        object.__setattr__(self, "mean", _freeze(mean))
        object.__setattr__(self, "cov", _freeze(cov))

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """
    Ellipsoid E(center, shape) = {x : (x - c)^T shape^{-1} (x - c) <= 1}.

    The shape matrix is symmetric positive definite.
    """

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        center = as_vector(self.center, "center")
        shape = _as_square(self.shape, center.size, "shape")
        smallest = float(np.linalg.eigvalsh(shape)[0])
        if smallest <= 0.0:
            raise InvalidDistributionError(
                f"ellipsoid shape is not positive definite (smallest eigenvalue {smallest:.3e})"
            )
        object.__setattr__(self, "center", _freeze(center))
        object.__setattr__(self, "shape", _freeze(shape))

    @property
    def dim(self) -> int:
        return self.center.size

    @cached_property
    def _cholesky(self):
        return linalg.cho_factor(self.shape, lower=True)

    @cached_property
    def root(self) -> np.ndarray:
        """Symmetric square root of the shape matrix."""
        return psd_sqrt(self.shape)

    @cached_property
    def precision(self) -> np.ndarray:
        """Inverse of the shape matrix."""
        inverse = linalg.cho_solve(self._cholesky, np.eye(self.dim))
        return 0.5 * (inverse + inverse.T)

    def quadratic_form(self, points) -> np.ndarray:
        """(x - c)^T shape^{-1} (x - c) for one point or a (k, n) batch."""
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        batch = np.atleast_2d(points)
        if batch.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"point dimension {batch.shape[1]} does not match ellipsoid dimension {self.dim}"
            )
        offsets = batch - self.center
        solved = linalg.cho_solve(self._cholesky, offsets.T).T
        values = np.einsum("ij,ij->i", offsets, solved)
        return values[0] if single else values

    def log_volume(self) -> float:
        """Natural log of the ellipsoid's volume."""
        n = self.dim
        _, logdet = np.linalg.slogdet(self.shape)
        unit_ball = 0.5 * n * np.log(np.pi) - special.gammaln(0.5 * n + 1.0)
        return float(0.5 * logdet + unit_ball)


def chi_square_cdf(x: float, n: int) -> float:
    """Chi-square CDF with ``n`` degrees of freedom (regularized lower incomplete gamma)."""
    if x <= 0.0:
        return 0.0
    return float(special.gammainc(0.5 * n, 0.5 * x))


def chi_square_quantile(p: float, n: int) -> float:
    """
    Radius rho_n with chi-square CDF(rho_n; n) = p.

    Root-finds the regularized lower incomplete gamma function with a bracketing
    Brent/bisection search.

    Args:
        p: Probability in the open interval (0, 1)
        n: Degrees of freedom (state or action dimension), n >= 1

    Returns:
        The chi-square quantile rho_n

    Raises:
        DomainError: If p is outside (0, 1) or n < 1
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    if int(n) != n or n < 1:
        raise DomainError(f"dimension must be a positive integer, got {n}")
    n = int(n)

    def excess(x: float) -> float:
        return float(special.gammainc(0.5 * n, 0.5 * x)) - p

    upper = max(1.0, float(n))
    while excess(upper) < 0.0:
        upper *= 2.0
    return float(
        optimize.brentq(
            excess, 0.0, upper, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=1000
        )
    )


def confidence_ellipsoid(g: Gaussian, p: float, regularize: bool = False) -> Ellipsoid:
    """
    Confidence ellipsoid E(mean, rho_n * cov) holding probability mass ``p``.

    Args:
        g: Gaussian with positive-definite covariance
        p: Confidence level in (0, 1)
        regularize: Add eps*I (eps = 1e-9 * trace / n) to a singular but PSD
            covariance instead of raising

    Returns:
        The confidence ellipsoid

    Raises:
        IllConditionedCovarianceError: If the covariance is singular and
            ``regularize`` is False, or if it is identically zero
    """
    rho = chi_square_quantile(p, g.dim)
    cov = np.array(g.cov)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals[-1] <= 0.0:
        raise IllConditionedCovarianceError(
            "covariance is identically zero", eigenvalue=float(eigvals[0])
        )
    if eigvals[0] <= SINGULAR_RTOL * eigvals[-1]:
        if not regularize:
            raise IllConditionedCovarianceError(
                f"covariance is singular (smallest eigenvalue {eigvals[0]:.3e})",
                eigenvalue=float(eigvals[0]),
            )
        epsilon = REGULARIZATION_SCALE * float(np.trace(cov)) / g.dim
        logger.warning(
            f"Regularizing singular covariance (smallest eigenvalue {eigvals[0]:.3e}) "
            f"with eps={epsilon:.3e}"
        )
        cov = cov + epsilon * np.eye(g.dim)
    return Ellipsoid(g.mean, rho * cov)


def contains(e: Ellipsoid, x, tol: float = 0.0) -> bool:
    """True iff (x - c)^T shape^{-1} (x - c) <= 1 + tol."""
    point = as_vector(x, "x")
    if point.size != e.dim:
        raise DimensionMismatchError(
            f"point dimension {point.size} does not match ellipsoid dimension {e.dim}"
        )
    return bool(e.quadratic_form(point) <= 1.0 + tol)


def _draw_count(size: Optional[int]) -> int:
    return 1 if size is None else int(size)


def sample_gaussian(
    g: Gaussian, rng: np.random.Generator, size: Optional[int] = None
) -> np.ndarray:
    """
    Draw from N(mean, cov) by transforming standard normals with a Cholesky factor.

    Singular covariances fall back to the symmetric square root, so a zero
    covariance always returns the mean.
    """
    try:
        factor = np.linalg.cholesky(g.cov)
    except np.linalg.LinAlgError:
        factor = psd_sqrt(g.cov)
    normals = rng.standard_normal((_draw_count(size), g.dim))
    draws = g.mean + normals @ factor.T
    return draws[0] if size is None else draws


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    directions = rng.standard_normal((count, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return directions / norms


def sample_in_ellipsoid(
    e: Ellipsoid, rng: np.random.Generator, size: Optional[int] = None
) -> np.ndarray:
    """Uniform samples from the ellipsoid (direction on sphere x radius^(1/n))."""
    count = _draw_count(size)
    radii = rng.random(count) ** (1.0 / e.dim)
    unit = _unit_directions(rng, count, e.dim) * radii[:, None]
    draws = e.center + unit @ e.root.T
    return draws[0] if size is None else draws


def sample_on_ellipsoid_boundary(
    e: Ellipsoid, rng: np.random.Generator, size: Optional[int] = None
) -> np.ndarray:
    """Samples on the ellipsoid's boundary surface."""
    count = _draw_count(size)
    draws = e.center + _unit_directions(rng, count, e.dim) @ e.root.T
    return draws[0] if size is None else draws


def affine_image(e: Ellipsoid, matrix, offset) -> Ellipsoid:
    """
    Exact image {A x + b : x in e} = E(A c + b, A shape A^T).

    Raises:
        InvalidDistributionError: If A does not have full row rank
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    offset = as_vector(offset, "offset")
    if matrix.shape[1] != e.dim or matrix.shape[0] != offset.size:
        raise DimensionMismatchError(
            f"affine map of shape {matrix.shape} with offset {offset.size} "
            f"does not apply to dimension {e.dim}"
        )
    shape = matrix @ e.shape @ matrix.T
    return Ellipsoid(matrix @ e.center + offset, 0.5 * (shape + shape.T))
