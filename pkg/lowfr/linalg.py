"""Dense and Kronecker-structured matrix primitives.

Matrices are plain two-dimensional ``float64`` numpy arrays (row-major, shape
carries the dimensions). The compound-symmetric correlation matrix used for
the time structure of the factor model gets its own type so that its inverse,
log-determinant and derivative can be taken in closed form.

The dense routines at the bottom (LU inverse, Cholesky solve, Schur-complement
conditioning) are deliberately naive; they are the reference path every
structured shortcut is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg as sla

from .errors import DimensionError, DomainError

_LOGGER = logging.getLogger(__name__)

# Largest number of entries a Kronecker product may allocate
MAX_KRON_ENTRIES = 2**31

Matrix = NDArray[np.float64]


def as_matrix(value: ArrayLike, name: str = "matrix") -> Matrix:
    """Coerce input to a finite 2-d float array.

    Raises:
        DimensionError: If the input is not two-dimensional
        DomainError: If any entry is NaN or infinite

    """
    mat = np.asarray(value, dtype=float)
    if mat.ndim != 2:
        raise DimensionError(f"{name} must be 2-d, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise DomainError(f"{name} has non-finite entries")
    return mat


def _require_square(mat: Matrix, name: str) -> int:
    if mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {mat.shape}")
    return mat.shape[0]


@dataclass(frozen=True)
class CompoundSymmetric:
    """Correlation matrix with unit diagonal and a common off-diagonal value.

    Positive definiteness is checked at construction: the eigenvalues are
    ``1 - offdiag`` (multiplicity ``dim - 1``) and ``1 + (dim - 1) * offdiag``.
    """

    dim: int
    offdiag: float

    def __post_init__(self) -> None:
        """Validate the positive-definite range."""
        if self.dim < 1:
            raise DimensionError(f"Compound-symmetric dimension must be >= 1, got {self.dim}")
        lower = -1.0 / (self.dim - 1) if self.dim > 1 else -np.inf
        if not (lower < self.offdiag < 1.0):
            raise DomainError(
                f"Off-diagonal {self.offdiag} outside positive-definite range "
                f"({lower}, 1) for dimension {self.dim}"
            )

    def dense(self) -> Matrix:
        """Return the explicit matrix."""
        mat = np.full((self.dim, self.dim), float(self.offdiag))
        np.fill_diagonal(mat, 1.0)
        return mat

    def inverse(self) -> Matrix:
        """Return the closed-form inverse (see :func:`cs_inverse`)."""
        return cs_inverse(self)

    def logdet(self) -> float:
        """Return log|Phi| from the two distinct eigenvalues."""
        phi, dim = float(self.offdiag), self.dim
        return (dim - 1) * np.log1p(-phi) + np.log1p((dim - 1) * phi)

    def dlogdet(self) -> float:
        """Return the derivative of log|Phi| with respect to the off-diagonal."""
        phi, dim = float(self.offdiag), self.dim
        return -(dim - 1) / (1.0 - phi) + (dim - 1) / (1.0 + (dim - 1) * phi)

    def dinverse(self) -> Matrix:
        """Return d(Phi^-1)/d(offdiag) = -Phi^-1 (J - I) Phi^-1."""
        inv = self.inverse()
        deriv = np.ones((self.dim, self.dim)) - np.eye(self.dim)
        return -inv @ deriv @ inv


def kron(a: ArrayLike, b: ArrayLike) -> Matrix:
    """Kronecker product with block (i, j) equal to ``a[i, j] * b``.

    Raises:
        DimensionError: If either factor is empty or the result is too large

    """
    left = as_matrix(a, "a")
    right = as_matrix(b, "b")
    if left.size == 0 or right.size == 0:
        raise DimensionError("Kronecker factors must be nonempty")
    if left.size * right.size > MAX_KRON_ENTRIES:
        raise DimensionError(
            f"Kronecker product of {left.shape} and {right.shape} is too large"
        )
    return np.kron(left, right)


def cs_inverse(phi_mat: CompoundSymmetric) -> Matrix:
    """Closed-form inverse of a compound-symmetric matrix.

    Phi^-1 = (1 / (1 - phi)) * (I - (phi / (1 + (T - 1) phi)) J)

    Args:
        phi_mat: Validated compound-symmetric matrix

    Returns:
        Dense inverse

    """
    phi, dim = float(phi_mat.offdiag), phi_mat.dim
    scale = phi / (1.0 + (dim - 1) * phi)
    inv = -scale * np.ones((dim, dim))
    inv[np.diag_indices(dim)] += 1.0
    return inv / (1.0 - phi)


def kron_trace_product(b: ArrayLike, v: ArrayLike, w: ArrayLike, phi: ArrayLike) -> float:
    """Return tr((B kron W)(V kron Phi)) as tr(B V) * tr(W Phi).

    Raises:
        DimensionError: If a factor is not square or the pairs do not conform

    """
    b_mat, v_mat = as_matrix(b, "B"), as_matrix(v, "V")
    w_mat, phi_mat = as_matrix(w, "W"), as_matrix(phi, "Phi")
    k = _require_square(b_mat, "B")
    t = _require_square(w_mat, "W")
    if _require_square(v_mat, "V") != k or _require_square(phi_mat, "Phi") != t:
        raise DimensionError("Kronecker trace factors are not conformable")
    # tr(XY) = sum(X * Y^T) avoids forming the product
    return float(np.sum(b_mat * v_mat.T) * np.sum(w_mat * phi_mat.T))


def symmetrize(mat: ArrayLike) -> Matrix:
    """Return (M + M^T) / 2."""
    arr = as_matrix(mat)
    _require_square(arr, "matrix")
    return 0.5 * (arr + arr.T)


# ---------------------------------------------------------------------------
# Dense reference routines
# ---------------------------------------------------------------------------


def dense_inverse(mat: ArrayLike) -> Matrix:
    """Invert a general square matrix through an LU factorization."""
    arr = as_matrix(mat)
    dim = _require_square(arr, "matrix")
    try:
        lu_piv = sla.lu_factor(arr, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as err:
        raise DomainError(f"LU factorization failed: {err}") from err
    return sla.lu_solve(lu_piv, np.eye(dim), check_finite=False)


def cholesky(mat: ArrayLike, name: str = "matrix") -> Matrix:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises:
        DomainError: If the matrix is not positive definite

    """
    arr = as_matrix(mat, name)
    _require_square(arr, name)
    try:
        return sla.cholesky(arr, lower=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        raise DomainError(f"{name} is not positive definite") from err


def cholesky_solve(mat: ArrayLike, rhs: ArrayLike) -> NDArray[np.float64]:
    """Solve M x = b for symmetric positive-definite M."""
    factor = cholesky(mat)
    return sla.cho_solve((factor, True), np.asarray(rhs, dtype=float), check_finite=False)


def spd_inverse(mat: ArrayLike, name: str = "matrix") -> Matrix:
    """Invert a symmetric positive-definite matrix through its Cholesky factor."""
    factor = cholesky(mat, name)
    inv = sla.cho_solve((factor, True), np.eye(factor.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T)


def is_positive_definite(mat: ArrayLike, tol: float = 0.0) -> bool:
    """Check positive definiteness through the smallest eigenvalue."""
    arr = symmetrize(mat)
    return bool(np.linalg.eigvalsh(arr)[0] > tol)


def gaussian_conditional(
    cov_aa: ArrayLike, cov_ab: ArrayLike, cov_bb: ArrayLike
) -> tuple[Matrix, Matrix]:
    """Condition a zero-mean joint Gaussian (a, b) on b by brute force.

    Args:
        cov_aa: Cov(a)
        cov_ab: Cov(a, b)
        cov_bb: Cov(b)

    Returns:
        (A, V) with a | b ~ N(A b, V), V the Schur complement

    """
    aa, ab, bb = as_matrix(cov_aa), as_matrix(cov_ab), as_matrix(cov_bb)
    gain = cholesky_solve(bb, ab.T).T
    schur = aa - gain @ ab.T
    return gain, 0.5 * (schur + schur.T)
