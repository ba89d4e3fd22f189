import numpy as np
import pytest

from dualgossip.errors import InvalidInputError, NumericalFailure
from dualgossip.verification import (
    FiniteDiffSpec,
    centralized_average_oracle,
    dense_second_eigenvalue,
    finite_diff_grad,
    grads_agree,
    jacobi_eigenvalues,
)


def test_finite_diff_quadratic_is_near_exact():
    grad = finite_diff_grad(lambda x: 0.5 * float(x @ x), np.array([1.0, 2.0]))
    assert np.all(np.abs(grad - np.array([1.0, 2.0])) < 1e-9)


def test_finite_diff_constant_function_is_zero():
    grad = finite_diff_grad(lambda x: 3.5, np.zeros(4))
    assert np.array_equal(grad, np.zeros(4))


def test_finite_diff_flags_nonfinite_probe():
    def fn(x):
        return float("inf") if x[1] > 0 else 0.0

    with pytest.raises(NumericalFailure) as err:
        finite_diff_grad(fn, np.zeros(3))
    assert "coordinate 1" in str(err.value)


def test_grads_agree_respects_floor_and_tolerance():
    spec = FiniteDiffSpec()
    a = np.array([1.0, 1e-9, 2.0])
    b = np.array([1.0 + 1e-7, -1e-9, 2.0])
    assert grads_agree(a, b, spec)
    b[2] = 2.001
    assert not grads_agree(a, b, spec)


def test_jacobi_identity_second_eigenvalue():
    assert dense_second_eigenvalue(np.eye(4)) == pytest.approx(1.0, abs=1e-12)


def test_jacobi_uniform_matrix_is_rank_one():
    assert abs(dense_second_eigenvalue(np.full((5, 5), 0.2))) < 1e-12


def test_jacobi_ring4_metropolis_second_eigenvalue():
    # Circulant closed form: eigenvalues 1/3 + (2/3)cos(2*pi*k/4) for k=0..3,
    # i.e. {1, 1/3, -1/3, 1/3}; second-largest magnitude is 1/3.
    p = np.full((4, 4), 0.0)
    for i in range(4):
        p[i, (i + 1) % 4] = p[i, (i - 1) % 4] = 1 / 3
        p[i, i] = 1 / 3
    assert abs(dense_second_eigenvalue(p)) == pytest.approx(1 / 3, abs=1e-12)


def test_jacobi_matches_lapack_on_random_symmetric():
    rng = np.random.default_rng(11)
    for _ in range(5):
        a = rng.standard_normal((8, 8))
        a = (a + a.T) / 2
        ours = np.sort(jacobi_eigenvalues(a))
        lapack = np.sort(np.linalg.eigvalsh(a))
        assert np.max(np.abs(ours - lapack)) < 1e-10


def test_jacobi_rejects_asymmetric_and_oversized():
    with pytest.raises(InvalidInputError):
        dense_second_eigenvalue(np.array([[0.0, 1.0], [0.5, 0.0]]))
    with pytest.raises(InvalidInputError):
        dense_second_eigenvalue(np.eye(33))


def test_centralized_average_single_adapter_is_identity():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(centralized_average_oracle([x]), x)


def test_centralized_average_of_opposites_is_zero():
    x = np.array([[1.0, 2.0], [-3.0, 4.0]])
    out = centralized_average_oracle([x, -x])
    assert np.array_equal(out, np.zeros_like(x))


def test_centralized_average_shape_mismatch():
    with pytest.raises(InvalidInputError):
        centralized_average_oracle([np.zeros(3), np.zeros(4)])
