import cmath
import math

import numpy as np
import pytest

from services.controls import FourierAnsatz
from services.densemath import CNOT, PAULI, random_hermitian, random_state, random_unitary
from services.errors import DimensionMismatchError, InvalidMatrixError, SingularOverlapError
from services.objective import (
    GateGoal, StateGoal, gate_goal_gradient, gate_infidelity, state_goal_gradient, state_infidelity,
)
from services.propagation import ControlledHamiltonian, propagate

X, Z = PAULI["X"], PAULI["Z"]


def test_gate_infidelity_zero_at_target():
    goal = GateGoal(CNOT)
    assert gate_infidelity(CNOT, goal) == 0.0


def test_gate_infidelity_ignores_global_phase():
    goal = GateGoal(CNOT)
    assert gate_infidelity(cmath.exp(0.7j) * CNOT, goal) < 1e-15


def test_gate_infidelity_of_orthogonal_gate_is_one():
    # Tr(X^dag Z) = 0 -> g = 1
    assert gate_infidelity(Z, GateGoal(X)) == pytest.approx(1.0)


def test_gate_goal_rejects_non_unitary_target():
    with pytest.raises(InvalidMatrixError):
        GateGoal(np.array([[1, 1], [0, 1]]))


def test_gate_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        gate_infidelity(np.eye(2), GateGoal(CNOT))


def test_singular_overlap_raises_for_gradient():
    goal = GateGoal(X)
    gradients = np.zeros((1, 2, 2), dtype=complex)
    with pytest.raises(SingularOverlapError):
        gate_goal_gradient(Z, gradients, goal)


def test_state_infidelity_examples():
    zero, one = np.array([1, 0]), np.array([0, 1])
    assert state_infidelity(zero, StateGoal(one, zero)) == 0.0
    assert state_infidelity(one, StateGoal(zero, zero)) == pytest.approx(1.0)
    plus = np.array([1, 1]) / np.sqrt(2)
    assert state_infidelity(plus, StateGoal(zero, zero)) == pytest.approx(0.5)


def test_state_goal_requires_unit_vectors():
    with pytest.raises(InvalidMatrixError):
        StateGoal(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    with pytest.raises(DimensionMismatchError):
        StateGoal(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))


def test_initial_blocks():
    assert np.array_equal(GateGoal(CNOT).initial_block(), np.eye(4))
    psi = random_state(3, 1)
    assert StateGoal(psi, random_state(3, 2)).initial_block().shape == (3, 1)


def _linear_path(u0, direction, epsilon):
    return u0 + epsilon * direction


def test_gate_goal_gradient_matches_directional_difference():
    # g along U + eps*V has slope -Re(conj(z)/|z| Tr(Ug^dag V))/d
    goal = GateGoal(random_unitary(3, 1))
    u = random_unitary(3, 2)
    direction = random_unitary(3, 3) * 0.1j
    gradient = gate_goal_gradient(u, direction[None], goal)[0]
    h = 1e-7
    difference = (gate_infidelity(_linear_path(u, direction, h), goal)
                  - gate_infidelity(_linear_path(u, direction, -h), goal)) / (2 * h)
    assert gradient == pytest.approx(difference, abs=1e-7)


def test_state_goal_gradient_matches_directional_difference():
    goal = StateGoal(random_state(4, 1), random_state(4, 2))
    psi = random_state(4, 3)
    direction = random_state(4, 4) * (0.3 - 0.2j)
    gradient = state_goal_gradient(psi, direction[None, :, None], goal)[0]
    h = 1e-7
    difference = (state_infidelity(psi + h * direction, goal) - state_infidelity(psi - h * direction, goal)) / (2 * h)
    assert gradient == pytest.approx(difference, abs=1e-7)


def test_goal_gradient_through_propagation():
    hamiltonian = ControlledHamiltonian(random_hermitian(2, 8), [(X, 0)])
    ansatz = FourierAnsatz(1.0, 1, 2)
    alpha = FourierAnsatz.pack([[0.6, -0.3]], [[2.0, 3.5]], [[0.2, 1.0]])
    goal = GateGoal(random_unitary(2, 9))
    result = propagate(hamiltonian, ansatz, alpha, 1.0, with_gradient=True)
    evaluation = goal.evaluate(result.propagator, result.gradients)
    h = 1e-6
    for slot in range(ansatz.n_parameters):
        plus, minus = alpha.copy(), alpha.copy()
        plus[slot] += h
        minus[slot] -= h
        g_plus = goal.evaluate(propagate(hamiltonian, ansatz, plus, 1.0).propagator).value
        g_minus = goal.evaluate(propagate(hamiltonian, ansatz, minus, 1.0).propagator).value
        assert evaluation.gradient[slot] == pytest.approx((g_plus - g_minus) / (2 * h), abs=1e-7)


def test_evaluate_without_gradients_returns_value_only():
    evaluation = GateGoal(CNOT).evaluate(CNOT)
    assert evaluation.value == 0.0
    assert evaluation.gradient.size == 0
    assert abs(evaluation.overlap - 4.0) < 1e-15


@pytest.mark.parametrize("phase", [0.3, math.pi / 3, -2.0])
def test_gate_goal_gradient_ignores_the_global_phase_of_the_propagator(phase):
    goal = GateGoal(random_unitary(3, 4))
    u = random_unitary(3, 5)
    gradients = np.array([random_unitary(3, 6 + s) * 0.2j for s in range(4)])
    rotation = cmath.exp(1j * phase)
    plain = gate_goal_gradient(u, gradients, goal)
    rotated = gate_goal_gradient(rotation * u, rotation * gradients, goal)
    assert np.max(np.abs(plain - rotated)) < 1e-12
    # and under a phase on the target gate
    shifted = gate_goal_gradient(u, gradients, GateGoal(rotation * goal.target))
    assert np.max(np.abs(plain - shifted)) < 1e-12


def test_state_goal_gradient_ignores_the_global_phase_of_the_state():
    goal = StateGoal(random_state(4, 1), random_state(4, 2))
    psi = random_state(4, 3)
    gradients = np.array([random_state(4, 10 + s) * (0.4 + 0.1j * s) for s in range(3)])[:, :, None]
    rotation = cmath.exp(0.9j)
    plain = state_goal_gradient(psi, gradients, goal)
    rotated = state_goal_gradient(rotation * psi, rotation * gradients, goal)
    assert np.max(np.abs(plain - rotated)) < 1e-12
