"""
Dense Math Module - Complex linear algebra kernels and seeded random ensembles

Matrices are square ``complex128`` numpy arrays. Units use hbar = 1.
Random ensembles draw from ``numpy.random.default_rng`` (PCG64), so every
generator is a pure function of ``(dim, seed)``.
"""

import math
from functools import reduce
from typing import Sequence

import numpy as np
from scipy.linalg import qr

from services.errors import DimensionMismatchError, InvalidMatrixError

ComplexMatrix = np.ndarray
ComplexVector = np.ndarray

# Scaled norm bound and Taylor order of the expm core
EXPM_SCALED_NORM = 0.5
EXPM_TAYLOR_ORDER = 18

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}

CNOT = np.array(
    [[1, 0, 0, 0],
     [0, 1, 0, 0],
     [0, 0, 0, 1],
     [0, 0, 1, 0]],
    dtype=complex,
)


def as_complex_matrix(data, name: str = "matrix") -> ComplexMatrix:
    """Convert ``data`` to a validated square complex matrix."""
    matrix = np.array(data, dtype=complex)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise InvalidMatrixError(f"{name} must be square, got shape {matrix.shape}")
    if matrix.shape[0] < 1:
        raise InvalidMatrixError(f"{name} must have dimension >= 1")
    if not np.all(np.isfinite(matrix)):
        raise InvalidMatrixError(f"{name} has non-finite entries")
    return matrix


def matmul(a: ComplexMatrix, b: ComplexMatrix) -> ComplexMatrix:
    """Matrix product ``a @ b``."""
    if a.shape[-1] != b.shape[-2]:
        raise DimensionMismatchError(a.shape[-1], b.shape[-2])
    return a @ b


def dagger(a: ComplexMatrix) -> ComplexMatrix:
    """Conjugate transpose."""
    return np.conj(np.swapaxes(a, -1, -2))


def trace(a: ComplexMatrix) -> complex:
    return complex(np.trace(a))


def frobenius_norm(a: ComplexMatrix) -> float:
    return float(np.linalg.norm(a))


def is_hermitian(a: ComplexMatrix, tolerance: float = 1e-12) -> bool:
    return frobenius_norm(a - dagger(a)) <= tolerance


def unitarity_defect(u: ComplexMatrix) -> float:
    """Frobenius distance of ``u^dag u`` from the identity."""
    return frobenius_norm(dagger(u) @ u - np.eye(u.shape[-1]))


def expm(a: ComplexMatrix) -> ComplexMatrix:
    """
    Matrix exponential by scaling and squaring around a Taylor core.

    Accepts a single matrix or a stack ``(..., dim, dim)``. The whole stack is
    scaled by the same power of two, chosen so that the largest scaled
    Frobenius norm is at most ``EXPM_SCALED_NORM``.

    Args:
        a: square matrix or stack of square matrices

    Returns:
        ndarray: exp(a) with the same shape as ``a``
    """
    a = np.asarray(a, dtype=complex)
    norms = np.linalg.norm(a, axis=(-2, -1))
    largest = float(np.max(norms)) if norms.size else 0.0
    squarings = 0
    if largest > EXPM_SCALED_NORM:
        squarings = int(math.ceil(math.log2(largest / EXPM_SCALED_NORM)))
    scaled = a / (2.0 ** squarings)

    identity = np.broadcast_to(np.eye(a.shape[-1], dtype=complex), a.shape)
    result = identity.copy()
    term = identity.copy()
    for k in range(1, EXPM_TAYLOR_ORDER + 1):
        term = (term @ scaled) / k
        result = result + term

    for _ in range(squarings):
        result = result @ result
    return result


def ordered_product(stack: np.ndarray) -> ComplexMatrix:
    """
    Time-ordered product ``stack[-1] @ ... @ stack[0]``.

    Reduces pairwise so each level is a single batched matmul.
    """
    if len(stack) == 0:
        raise InvalidMatrixError("cannot take the product of an empty stack")
    while len(stack) > 1:
        paired = stack[1::2] @ stack[0:len(stack) - 1:2]
        if len(stack) % 2:
            paired = np.concatenate([paired, stack[-1:]], axis=0)
        stack = paired
    return stack[0]


def tensor(*operators: ComplexMatrix) -> ComplexMatrix:
    """Kronecker product of the operators, left factor outermost."""
    return reduce(np.kron, operators)


def pauli_string(labels: Sequence[str]) -> ComplexMatrix:
    """Tensor product of named single-qubit operators, e.g. ``["Z", "Z"]``."""
    try:
        return tensor(*(PAULI[label] for label in labels))
    except KeyError as exc:
        raise InvalidMatrixError(f"unknown operator name {exc.args[0]!r}; expected one of I, X, Y, Z") from None


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for ``keys`` under a root ``seed``, via ``SeedSequence``."""
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys)])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def _standard_normal_complex(rng: np.random.Generator, size) -> np.ndarray:
    return rng.standard_normal(size) + 1j * rng.standard_normal(size)


def random_hermitian(dim: int, seed: int) -> ComplexMatrix:
    """
    Hermitian matrix from the Gaussian unitary ensemble convention.

    Off-diagonal entries have unit-variance real and imaginary parts, diagonal
    entries are real unit-variance Gaussians. The result is exactly Hermitian.
    """
    if dim < 1:
        raise InvalidMatrixError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    upper = np.triu(_standard_normal_complex(rng, (dim, dim)), k=1)
    diagonal = rng.standard_normal(dim)
    return upper + dagger(upper) + np.diag(diagonal).astype(complex)


def random_unitary(dim: int, seed: int) -> ComplexMatrix:
    """Haar unitary: QR of a complex Ginibre matrix with the phases of diag(R) removed."""
    if dim < 1:
        raise InvalidMatrixError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    ginibre = _standard_normal_complex(rng, (dim, dim)) / math.sqrt(2.0)
    q, r = qr(ginibre)
    phases = np.diag(r) / np.abs(np.diag(r))
    return q * phases


def random_state(dim: int, seed: int) -> ComplexVector:
    """Unit vector with a complex Gaussian (uniform) direction."""
    if dim < 1:
        raise InvalidMatrixError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    vector = _standard_normal_complex(rng, dim)
    return vector / np.linalg.norm(vector)
