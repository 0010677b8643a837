import math

import numpy as np
import pytest

from deltaproduct.errors import ContractViolationError, NumericalError
from deltaproduct.numerics import as_matrix, eig2x2, matmul, pca, singular_values, spectral_norm, spectral_radius


def test_as_matrix_promotes_vectors_to_columns():
    assert as_matrix([1.0, 2.0, 3.0]).shape == (3, 1)


def test_as_matrix_rejects_non_finite_entries():
    with pytest.raises(NumericalError):
        as_matrix([[1.0, np.nan]])


def test_as_matrix_rejects_three_dimensional_input():
    with pytest.raises(ContractViolationError):
        as_matrix(np.zeros((2, 2, 2)))


def test_matmul_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.allclose(matmul(a, b), a @ b, atol=1e-14)


def test_matmul_dimension_mismatch():
    with pytest.raises(ContractViolationError):
        matmul(np.eye(2), np.eye(3))


def test_eig2x2_rotation_is_complex_on_unit_circle():
    theta = 0.7
    rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    spectrum = eig2x2(rotation)
    assert not spectrum.is_real
    assert spectrum.eigenvalues[0] == pytest.approx(complex(math.cos(theta), math.sin(theta)))
    assert spectrum.spectral_radius == pytest.approx(1.0)


def test_eig2x2_diagonal():
    spectrum = eig2x2(np.diag([3.0, -2.0]))
    assert spectrum.is_real
    assert spectrum.eigenvalues == (3.0 + 0j, -2.0 + 0j)


def test_eig2x2_matches_numpy_on_random_matrices():
    rng = np.random.default_rng(1)
    for _ in range(200):
        m = rng.normal(size=(2, 2))
        expected = sorted(np.linalg.eigvals(m), key=lambda z: (z.real, z.imag))
        got = sorted(eig2x2(m).eigenvalues, key=lambda z: (z.real, z.imag))
        assert np.allclose(got, expected, atol=1e-10)


def test_eig2x2_needs_2x2():
    with pytest.raises(ContractViolationError):
        eig2x2(np.eye(3))


def test_singular_values_descending_and_nonnegative():
    sigma = singular_values(np.diag([1.0, -3.0, 2.0]))
    assert np.allclose(sigma, [3.0, 2.0, 1.0])


def test_singular_values_of_empty_matrix():
    assert singular_values(np.zeros((0, 3))).size == 0


def test_spectral_norm_and_radius_differ_for_shear():
    shear = np.array([[1.0, 1.0], [0.0, 1.0]])
    assert spectral_radius(shear) == pytest.approx(1.0)
    assert spectral_norm(shear) == pytest.approx((1 + math.sqrt(5)) / 2)


def test_spectral_radius_needs_square_matrix():
    with pytest.raises(ContractViolationError):
        spectral_radius(np.ones((2, 3)))


def test_pca_points_on_a_line():
    t = np.linspace(-1.0, 1.0, 11)
    rows = np.stack([t, 2 * t, -t], axis=1)
    ratios, components = pca(rows)
    assert ratios[0] == pytest.approx(1.0)
    assert abs(components[0] @ np.array([1.0, 2.0, -1.0]) / math.sqrt(6)) == pytest.approx(1.0)


@pytest.mark.parametrize('rows', [np.ones((4, 3)), np.full((3, 3), 0.1), np.full((5, 2), 0.7), np.full((6, 4), -1e-7)])
def test_pca_rejects_constant_rows(rows):
    with pytest.raises(NumericalError):
        pca(rows)


def test_pca_keeps_tiny_but_real_variance():
    rows = np.array([[0.1, 0.2], [0.1 + 1e-9, 0.2], [0.1, 0.2 - 2e-9]])
    ratios, _ = pca(rows)
    assert ratios.sum() == pytest.approx(1.0)


def test_pca_needs_two_rows():
    with pytest.raises(ContractViolationError):
        pca(np.ones((1, 3)))
