import math
from functools import reduce

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from services.densemath import (
    CNOT, PAULI, as_complex_matrix, dagger, derive_seed, expm, frobenius_norm, is_hermitian,
    matmul, ordered_product, pauli_string, random_hermitian, random_state, random_unitary,
    tensor, trace, unitarity_defect,
)
from services.errors import DimensionMismatchError, InvalidMatrixError

X, Y, Z, I2 = PAULI["X"], PAULI["Y"], PAULI["Z"], PAULI["I"]


def test_expm_zero_is_identity():
    # exp(0) -> identity
    assert np.allclose(expm(np.zeros((3, 3))), np.eye(3), atol=0)


def test_expm_diagonal():
    # diagonal input -> elementwise exponential
    d = np.diag([0.3, -1.2, 2.5j])
    assert np.allclose(expm(d), np.diag(np.exp([0.3, -1.2, 2.5j])), atol=1e-13)


def test_expm_pauli_rotation_needs_squaring():
    # large angle forces several squarings -> still matches the closed form
    theta = 7.3
    expected = math.cos(theta) * I2 - 1j * math.sin(theta) * X
    assert frobenius_norm(expm(-1j * theta * X) - expected) < 1e-12


def test_expm_batched_matches_single():
    stack = np.stack([-1j * 0.4 * X, -1j * 3.0 * Z, np.zeros((2, 2))])
    batched = expm(stack)
    for single, matrix in zip(batched, stack):
        assert frobenius_norm(single - expm(matrix)) < 1e-13


@settings(max_examples=30, deadline=None)
@given(dim=st.integers(min_value=1, max_value=6), seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_expm_of_anti_hermitian_is_unitary(dim, seed):
    h = random_hermitian(dim, seed)
    assert unitarity_defect(expm(-1j * h)) < 1e-11


def test_ordered_product_is_time_ordered():
    # later factors multiply from the left
    stack = np.stack([random_unitary(3, seed) for seed in range(5)])
    expected = reduce(lambda acc, u: u @ acc, stack[1:], stack[0])
    assert frobenius_norm(ordered_product(stack) - expected) < 1e-12


def test_ordered_product_single_and_empty():
    assert np.array_equal(ordered_product(np.stack([X])), X)
    with pytest.raises(InvalidMatrixError):
        ordered_product(np.zeros((0, 2, 2)))


def test_matmul_dimension_mismatch():
    # 2x3 times 2x2 -> should fail with both dims named
    with pytest.raises(DimensionMismatchError) as info:
        matmul(np.ones((2, 3)), np.ones((2, 2)))
    assert "3" in str(info.value) and "2" in str(info.value)


def test_as_complex_matrix_rejects_bad_input():
    with pytest.raises(InvalidMatrixError):
        as_complex_matrix(np.ones((3, 2)))
    with pytest.raises(InvalidMatrixError):
        as_complex_matrix([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(InvalidMatrixError):
        as_complex_matrix(np.zeros((0, 0)))


def test_dagger_trace_norm():
    a = np.array([[1 + 2j, 3], [4j, -1]])
    assert np.array_equal(dagger(a), np.array([[1 - 2j, -4j], [3, -1]]))
    assert trace(a) == complex(0 + 2j)
    assert frobenius_norm(np.eye(4)) == pytest.approx(2.0)


def test_random_hermitian_is_hermitian_and_seeded():
    h = random_hermitian(5, 11)
    assert is_hermitian(h, 0.0)
    assert np.array_equal(h, random_hermitian(5, 11))
    assert not np.array_equal(h, random_hermitian(5, 12))


def test_random_unitary_is_unitary_and_seeded():
    u = random_unitary(6, 3)
    assert unitarity_defect(u) < 1e-12
    assert np.array_equal(u, random_unitary(6, 3))


def test_random_unitary_dimension_one_is_a_phase():
    u = random_unitary(1, 5)
    assert abs(abs(u[0, 0]) - 1.0) < 1e-14


def test_random_state_has_unit_norm():
    psi = random_state(4, 9)
    assert np.linalg.norm(psi) == pytest.approx(1.0, abs=1e-14)


def test_random_generators_reject_zero_dim():
    with pytest.raises(InvalidMatrixError):
        random_hermitian(0, 1)
    with pytest.raises(InvalidMatrixError):
        random_unitary(0, 1)


def test_derive_seed_is_deterministic_and_key_sensitive():
    assert derive_seed(5, 1, 2) == derive_seed(5, 1, 2)
    assert derive_seed(5, 1, 2) != derive_seed(5, 2, 1)
    assert derive_seed(5, 1) != derive_seed(6, 1)


def test_pauli_strings_and_tensor():
    assert np.array_equal(pauli_string("ZZ"), np.kron(Z, Z))
    assert np.array_equal(pauli_string(["X", "I", "Y"]), tensor(X, I2, Y))
    with pytest.raises(InvalidMatrixError):
        pauli_string("ZQ")


def test_cnot_is_unitary_and_hermitian():
    assert unitarity_defect(CNOT) == 0.0
    assert is_hermitian(CNOT)
