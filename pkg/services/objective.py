"""
Objective Module - Goal functions and their exact gradients

Gate goal:  g = 1 - |Tr(U_goal^dag U(T))| / dim
State goal: g = 1 - |<psi_goal|psi(T)>|^2
Both are invariant under a global phase of U(T).
"""

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from services.densemath import as_complex_matrix, unitarity_defect
from services.errors import DimensionMismatchError, InvalidMatrixError, SingularOverlapError

# Below this |overlap| the modulus is not differentiable in practice
SINGULAR_OVERLAP = 1e-14


@dataclass(eq=False)
class GoalEvaluation:
    value: float
    gradient: np.ndarray = field(default_factory=lambda: np.zeros(0))
    overlap: complex = 0j


@dataclass(eq=False)
class GateGoal:
    target: np.ndarray

    def __post_init__(self):
        self.target = as_complex_matrix(self.target, "target gate")
        if unitarity_defect(self.target) > 1e-10:
            raise InvalidMatrixError("target gate is not unitary")

    @property
    def dim(self) -> int:
        return self.target.shape[0]

    def initial_block(self) -> np.ndarray:
        return np.eye(self.dim, dtype=complex)

    def evaluate(self, final: np.ndarray, gradients: np.ndarray = None) -> GoalEvaluation:
        value = gate_infidelity(final, self)
        overlap = _gate_overlap(final, self)
        if gradients is None or len(gradients) == 0:
            return GoalEvaluation(value, np.zeros(0), overlap)
        return GoalEvaluation(value, gate_goal_gradient(final, gradients, self), overlap)


@dataclass(eq=False)
class StateGoal:
    initial_state: np.ndarray
    target_state: np.ndarray

    def __post_init__(self):
        self.initial_state = _unit_vector(self.initial_state, "initial state")
        self.target_state = _unit_vector(self.target_state, "target state")
        if self.initial_state.size != self.target_state.size:
            raise DimensionMismatchError(self.initial_state.size, self.target_state.size, "state")

    @property
    def dim(self) -> int:
        return self.initial_state.size

    def initial_block(self) -> np.ndarray:
        return self.initial_state.reshape(-1, 1).copy()

    def evaluate(self, final: np.ndarray, gradients: np.ndarray = None) -> GoalEvaluation:
        psi = np.asarray(final, dtype=complex).reshape(-1)
        value = state_infidelity(psi, self)
        overlap = complex(np.vdot(self.target_state, psi))
        if gradients is None or len(gradients) == 0:
            return GoalEvaluation(value, np.zeros(0), overlap)
        return GoalEvaluation(value, state_goal_gradient(psi, gradients, self), overlap)


Goal = Union[GateGoal, StateGoal]


def _unit_vector(data, name: str) -> np.ndarray:
    vector = np.asarray(data, dtype=complex).reshape(-1)
    if vector.size < 1 or not np.all(np.isfinite(vector)):
        raise InvalidMatrixError(f"{name} must be a finite, non-empty vector")
    if abs(np.linalg.norm(vector) - 1.0) > 1e-12:
        raise InvalidMatrixError(f"{name} must have unit norm")
    return vector


def _gate_overlap(u: np.ndarray, goal: GateGoal) -> complex:
    if u.shape != goal.target.shape:
        raise DimensionMismatchError(goal.dim, u.shape[0])
    # Tr(A^dag B) = sum_ij conj(A_ij) B_ij
    return complex(np.vdot(goal.target, u))


def gate_infidelity(u: np.ndarray, goal: GateGoal) -> float:
    """1 - |Tr(U_goal^dag U)| / dim, clipped below at zero."""
    return max(0.0, 1.0 - abs(_gate_overlap(u, goal)) / goal.dim)


def gate_goal_gradient(u: np.ndarray, gradients: np.ndarray, goal: GateGoal) -> np.ndarray:
    """
    dg/dalpha_s = -Re( conj(z)/|z| * Tr(U_goal^dag dU/dalpha_s) / dim ), z = Tr(U_goal^dag U).

    Raises:
        SingularOverlapError: |z| below SINGULAR_OVERLAP
    """
    overlap = _gate_overlap(u, goal)
    if abs(overlap) < SINGULAR_OVERLAP:
        raise SingularOverlapError(overlap)
    gradients = np.asarray(gradients, dtype=complex)
    if gradients.size == 0:
        return np.zeros(0)
    projected = np.einsum("ij,sij->s", goal.target.conj(), gradients)
    return -np.real(np.conj(overlap) / abs(overlap) * projected) / goal.dim


def state_infidelity(psi: np.ndarray, goal: StateGoal) -> float:
    """1 - |<psi_goal|psi>|^2, clipped below at zero."""
    psi = np.asarray(psi, dtype=complex).reshape(-1)
    if psi.size != goal.dim:
        raise DimensionMismatchError(goal.dim, psi.size, "state")
    return max(0.0, 1.0 - abs(np.vdot(goal.target_state, psi)) ** 2)


def state_goal_gradient(psi: np.ndarray, gradients: np.ndarray, goal: StateGoal) -> np.ndarray:
    """d(1 - |z|^2)/dalpha_s = -2 Re(conj(z) dz/dalpha_s), z = <psi_goal|psi>."""
    psi = np.asarray(psi, dtype=complex).reshape(-1)
    if psi.size != goal.dim:
        raise DimensionMismatchError(goal.dim, psi.size, "state")
    gradients = np.asarray(gradients, dtype=complex)
    if gradients.size == 0:
        return np.zeros(0)
    gradients = gradients.reshape(gradients.shape[0], -1)
    overlap = np.vdot(goal.target_state, psi)
    slopes = gradients @ goal.target_state.conj()
    return -2.0 * np.real(np.conj(overlap) * slopes)
