"""Small dense linear algebra shared by the Householder algebra, the constructions and the analysis tools.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Everything here is a pure function.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, NumericalError

Matrix = np.ndarray


@dataclass(frozen=True)
class Spectrum2:
    """Eigenvalues and discriminant of a real 2x2 matrix.

    Args:
        - eigenvalues (tuple[complex, complex]):
            Both roots of λ² − tr·λ + det, the one with the larger real part first.
        - discriminant (float):
            D = tr² − 4·det. D ≥ 0 means both eigenvalues are real (D = 0 is a repeated real root).
    """

    eigenvalues: tuple[complex, complex]
    discriminant: float

    @property
    def is_real(self) -> bool:
        return self.discriminant >= 0.0

    @property
    def spectral_radius(self) -> float:
        return max(abs(self.eigenvalues[0]), abs(self.eigenvalues[1]))


def as_matrix(data, name: str = 'matrix') -> Matrix:
    """Converts ``data`` to a finite 2-D float64 array.

    Raises:
        - ContractViolationError: When the input is not two-dimensional.
        - NumericalError: When the input has non-finite entries.
    """
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ContractViolationError(f'{name} must be two-dimensional, got shape {m.shape}')
    if not np.all(np.isfinite(m)):
        raise NumericalError(f'{name} has non-finite entries', report={'shape': m.shape})
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed summation order.

    ``np.einsum`` without path optimisation reduces over the inner index in a single deterministic loop, so the
    result does not depend on the BLAS build.

    Raises:
        - ContractViolationError: When ``a.cols != b.rows``.
    """
    a = as_matrix(a, 'a')
    b = as_matrix(b, 'b')
    if a.shape[1] != b.shape[0]:
        raise ContractViolationError(f'matmul dimension mismatch: {a.shape} x {b.shape}')
    return np.einsum('ik,kj->ij', a, b, optimize=False)


def eig2x2(m: Matrix) -> Spectrum2:
    """Closed-form spectrum of a real 2x2 matrix.

    Raises:
        - ContractViolationError: When ``m`` is not 2x2.
    """
    m = as_matrix(m)
    if m.shape != (2, 2):
        raise ContractViolationError(f'eig2x2 expects a 2x2 matrix, got {m.shape}')
    trace = float(m[0, 0] + m[1, 1])
    det = float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])
    discriminant = trace * trace - 4.0 * det
    if discriminant < 0.0:
        first = complex(trace / 2.0, np.sqrt(-discriminant) / 2.0)
        return Spectrum2(eigenvalues=(first, first.conjugate()), discriminant=discriminant)
    # cancellation-free pair of real roots
    q = (trace + np.copysign(np.sqrt(discriminant), trace)) / 2.0
    roots = (q, det / q) if q != 0.0 else (0.0, 0.0)
    high, low = max(roots), min(roots)
    return Spectrum2(eigenvalues=(complex(high), complex(low)), discriminant=discriminant)


def singular_values(m: Matrix) -> np.ndarray:
    """Singular values in descending order.

    Raises:
        - NumericalError: When the decomposition does not converge; the report carries the shape, the Frobenius
          norm and the largest absolute entry of the input.
    """
    m = as_matrix(m)
    if m.size == 0:
        return np.zeros(0)
    try:
        sigma = np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as err:
        raise NumericalError(
            f'SVD did not converge for a {m.shape[0]}x{m.shape[1]} matrix: {err}',
            report={
                'shape': m.shape,
                'frobenius_norm': float(np.linalg.norm(m)),
                'max_abs_entry': float(np.max(np.abs(m))),
            },
        ) from err
    return np.sort(np.abs(sigma))[::-1]


def spectral_norm(m: Matrix) -> float:
    sigma = singular_values(m)
    return float(sigma[0]) if sigma.size else 0.0


def spectral_radius(m: Matrix) -> float:
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ContractViolationError(f'spectral radius needs a square matrix, got {m.shape}')
    if m.shape == (2, 2):
        return eig2x2(m).spectral_radius
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def pca(rows) -> tuple[np.ndarray, Matrix]:
    """Principal component analysis of a set of row vectors.

    Args:
        - rows (array-like):
            ``k`` vectors of equal dimension ``p`` (``k >= 2``).

    Returns:
        - tuple[np.ndarray, Matrix]:
            Explained variance ratios (descending, summing to one) and the components as rows of a
            ``min(k, p) x p`` matrix.

    Raises:
        - ContractViolationError: When fewer than two rows are given.
        - NumericalError: When the rows have zero total variance.
    """
    data = np.asarray(rows, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ContractViolationError(f'pca needs at least two rows of equal dimension, got shape {data.shape}')
    data = as_matrix(data, 'rows')
    if not np.ptp(data, axis=0).any():
        raise NumericalError('PCA input has zero total variance', report={'shape': data.shape})
    centered = data - data.mean(axis=0, keepdims=True)
    try:
        _, sigma, components = np.linalg.svd(centered, full_matrices=False)
    except np.linalg.LinAlgError as err:
        raise NumericalError(f'PCA decomposition failed: {err}', report={'shape': data.shape}) from err
    variance = sigma**2
    total = float(variance.sum())
    if total <= 0.0:
        raise NumericalError('PCA input has zero total variance', report={'shape': data.shape})
    return variance / total, components
