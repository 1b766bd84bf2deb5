import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from services.controls import FourierAnsatz, PwcAnsatz
from services.densemath import (
    PAULI, derive_seed, expm, frobenius_norm, random_hermitian, random_state, unitarity_defect,
)
from services.errors import DimensionMismatchError, InvalidMatrixError, StepTooLargeError
from services.propagation import (
    ControlledHamiltonian, PropagatorSettings, propagate, pwc_propagate, reference_propagate,
    reference_run, taylor_step, taylor_step_with_gradient,
)
from services.studies import PwcStudySpec, pwc_study_problem

X, Y, Z = PAULI["X"], PAULI["Y"], PAULI["Z"]


def idle_fourier(duration=1.0):
    ansatz = FourierAnsatz(duration, 1, 1)
    return ansatz, FourierAnsatz.pack([[0.0]], [[1.0]], [[0.0]])


def random_problem(dim=4, n_controls=2, n_terms=2, seed=0, duration=1.0):
    hamiltonian = ControlledHamiltonian(
        random_hermitian(dim, seed),
        [(random_hermitian(dim, seed + 1 + k), k) for k in range(n_controls)],
    )
    rng = np.random.default_rng(seed)
    shape = (n_controls, n_terms)
    ansatz = FourierAnsatz(duration, n_controls, n_terms)
    alpha = FourierAnsatz.pack(rng.uniform(-1, 1, shape), rng.uniform(0.5, 4.0, shape), rng.uniform(0, 6.28, shape))
    return hamiltonian, ansatz, alpha


def finite_difference_gradients(hamiltonian, ansatz, alpha, duration, h=1e-6, initial=None):
    columns = []
    for index in ansatz.trainable_indices:
        plus, minus = alpha.copy(), alpha.copy()
        plus[index] += h
        minus[index] -= h
        u_plus = propagate(hamiltonian, ansatz, plus, duration, initial=initial).propagator
        u_minus = propagate(hamiltonian, ansatz, minus, duration, initial=initial).propagator
        columns.append((u_plus - u_minus) / (2 * h))
    return np.array(columns)


def test_hamiltonian_rejects_non_hermitian_and_mismatched_controls():
    with pytest.raises(InvalidMatrixError):
        ControlledHamiltonian(np.array([[0, 1], [0, 0]]), [])
    with pytest.raises(DimensionMismatchError):
        ControlledHamiltonian(Z, [(np.eye(4), 0)])


def test_hamiltonian_more_controls_than_ansatz_raises():
    hamiltonian = ControlledHamiltonian(Z, [(X, 0), (Y, 1)])
    ansatz, alpha = idle_fourier()
    with pytest.raises(DimensionMismatchError):
        propagate(hamiltonian, ansatz, alpha, 1.0)


def test_single_taylor_step_of_pi_half_x():
    # H = (pi/2) X, dt = 1, order 20 -> U = -iX
    hamiltonian = ControlledHamiltonian(math.pi / 2 * X, [(Z, 0)])
    ansatz, alpha = idle_fourier()
    u = taylor_step(hamiltonian, ansatz, alpha, 0.0, 1.0, np.eye(2), PropagatorSettings(order=20))
    assert frobenius_norm(u - (-1j * X)) < 1e-13


def test_taylor_step_too_large_raises():
    hamiltonian = ControlledHamiltonian(math.pi / 2 * X, [(Z, 0)])
    ansatz, alpha = idle_fourier(duration=20.0)
    with pytest.raises(StepTooLargeError) as info:
        taylor_step(hamiltonian, ansatz, alpha, 0.0, 10.0, np.eye(2), PropagatorSettings(order=4))
    assert info.value.residual > info.value.tolerance


def test_taylor_step_with_gradient_checks_stack_shape():
    hamiltonian, ansatz, alpha = random_problem(dim=2, n_controls=1, n_terms=1)
    with pytest.raises(DimensionMismatchError):
        taylor_step_with_gradient(hamiltonian, ansatz, alpha, 0.0, 0.01, np.eye(2), np.zeros((2, 2, 2)))


def test_constant_hamiltonian_matches_expm():
    drift = random_hermitian(3, 4)
    hamiltonian = ControlledHamiltonian(drift, [(random_hermitian(3, 5), 0)])
    ansatz, alpha = idle_fourier(duration=2.0)
    result = propagate(hamiltonian, ansatz, alpha, 2.0)
    assert frobenius_norm(result.propagator - expm(-2.0j * drift)) < 1e-12


def test_propagator_is_unitary():
    hamiltonian, ansatz, alpha = random_problem(seed=3)
    result = propagate(hamiltonian, ansatz, alpha, 1.0)
    assert unitarity_defect(result.propagator) < 1e-10
    assert result.steps > 0 and result.hamiltonian_evaluations >= result.steps


def test_taylor_matches_reference_integrator():
    hamiltonian, ansatz, alpha = random_problem(seed=7)
    taylor = propagate(hamiltonian, ansatz, alpha, 1.0).propagator
    reference = reference_propagate(hamiltonian, ansatz, alpha, 1.0, tolerance=1e-12)
    assert frobenius_norm(taylor - reference) < 1e-8


def test_reference_clamps_tolerance_to_integrator_floor():
    hamiltonian, ansatz, alpha = random_problem(dim=2, n_controls=1, n_terms=1, seed=2)
    run = reference_run(hamiltonian, ansatz, alpha, 0.5, tolerance=1e-15)
    assert run.details["rtol"] >= 100 * np.finfo(float).eps
    with pytest.raises(ValueError):
        reference_run(hamiltonian, ansatz, alpha, 0.5, tolerance=1e-16)


def test_gradient_matches_finite_differences():
    hamiltonian, ansatz, alpha = random_problem(seed=11)
    exact = propagate(hamiltonian, ansatz, alpha, 1.0, with_gradient=True).gradients
    difference = finite_difference_gradients(hamiltonian, ansatz, alpha, 1.0)
    for slot in range(ansatz.n_trainable):
        error = frobenius_norm(exact[slot] - difference[slot]) / max(frobenius_norm(difference[slot]), 1e-4)
        assert error < 1e-5


def test_gradient_of_frozen_ansatz_is_empty():
    hamiltonian, ansatz, alpha = random_problem(dim=2, n_controls=1, n_terms=1)
    frozen = ansatz.with_trainable(np.zeros(ansatz.n_parameters, dtype=bool))
    result = propagate(hamiltonian, frozen, alpha, 1.0, with_gradient=True)
    assert result.gradients.shape == (0, 2, 2)


def test_flexible_width_gradient_matches_finite_differences():
    hamiltonian = ControlledHamiltonian(0.5 * Z, [(X, 0)])
    ansatz = PwcAnsatz(2.0, 1, 3, flexible=True)
    alpha = np.array([0.7, 0.9, -0.4, 1.1, 0.3, 1.0])
    exact = propagate(hamiltonian, ansatz, alpha, 2.0, with_gradient=True).gradients
    difference = finite_difference_gradients(hamiltonian, ansatz, alpha, 2.0)
    for slot in range(ansatz.n_trainable):
        error = frobenius_norm(exact[slot] - difference[slot]) / max(frobenius_norm(difference[slot]), 1e-4)
        assert error < 1e-5


def test_state_propagation_equals_propagator_times_state():
    hamiltonian, ansatz, alpha = random_problem(dim=4, seed=5)
    psi = random_state(4, 6).reshape(-1, 1)
    full = propagate(hamiltonian, ansatz, alpha, 1.0, with_gradient=True)
    column = propagate(hamiltonian, ansatz, alpha, 1.0, with_gradient=True, initial=psi)
    assert frobenius_norm(column.propagator - full.propagator @ psi) < 1e-11
    assert frobenius_norm(column.gradients - full.gradients @ psi) < 1e-10


def test_gradient_shares_the_derivative_stack():
    # joint propagation costs no extra Hamiltonian evaluations
    hamiltonian, ansatz, alpha = random_problem(n_controls=2, n_terms=3, seed=13)
    assert ansatz.n_trainable >= 8
    plain = propagate(hamiltonian, ansatz, alpha, 1.0)
    joint = propagate(hamiltonian, ansatz, alpha, 1.0, with_gradient=True)
    assert joint.hamiltonian_evaluations == plain.hamiltonian_evaluations
    assert joint.hamiltonian_evaluations < 0.5 * (ansatz.n_trainable + 1) * plain.hamiltonian_evaluations


def test_max_step_caps_the_step_size():
    hamiltonian, ansatz, alpha = random_problem(dim=2, n_controls=1, n_terms=1, seed=1)
    capped = propagate(hamiltonian, ansatz, alpha, 1.0, PropagatorSettings(max_step=0.01))
    assert capped.steps >= 100


def test_pwc_propagate_is_exact_for_pwc_controls():
    hamiltonian = ControlledHamiltonian(random_hermitian(2, 1), [(random_hermitian(2, 2), 0)])
    ansatz = PwcAnsatz(1.0, 1, 4)
    alpha = np.array([0.3, -1.2, 0.8, 0.1])
    taylor = propagate(hamiltonian, ansatz, alpha, 1.0).propagator
    for sampling in ("start", "midpoint"):
        assert frobenius_norm(pwc_propagate(hamiltonian, ansatz, alpha, 1.0, 4, sampling) - taylor) < 1e-11


def test_pwc_error_orders():
    # midpoint sampling is second order, start-of-slice first order
    hamiltonian, ansatz, alpha = random_problem(dim=2, n_controls=1, n_terms=2, seed=21)
    exact = propagate(hamiltonian, ansatz, alpha, 1.0).propagator
    errors = {
        (sampling, slices): frobenius_norm(pwc_propagate(hamiltonian, ansatz, alpha, 1.0, slices, sampling) - exact)
        for sampling in ("start", "midpoint") for slices in (100, 1000)
    }
    assert errors[("midpoint", 1000)] < errors[("midpoint", 100)] / 30
    assert errors[("start", 1000)] < errors[("start", 100)] / 5
    assert errors[("midpoint", 1000)] < errors[("start", 1000)]


def test_pwc_propagate_chunks_agree():
    hamiltonian, ansatz, alpha = random_problem(dim=2, n_controls=1, n_terms=1, seed=4)
    whole = pwc_propagate(hamiltonian, ansatz, alpha, 1.0, 500)
    chunked = pwc_propagate(hamiltonian, ansatz, alpha, 1.0, 500, chunk=64)
    assert frobenius_norm(whole - chunked) < 1e-12


def test_pwc_propagate_rejects_bad_arguments():
    hamiltonian, ansatz, alpha = random_problem(dim=2, n_controls=1, n_terms=1)
    with pytest.raises(ValueError):
        pwc_propagate(hamiltonian, ansatz, alpha, 1.0, 0)
    with pytest.raises(ValueError):
        pwc_propagate(hamiltonian, ansatz, alpha, 1.0, 10, sampling="end")


def test_propagator_settings_validation():
    with pytest.raises(ValueError):
        PropagatorSettings(order=1)
    with pytest.raises(ValueError):
        PropagatorSettings(order=30)
    with pytest.raises(ValueError):
        PropagatorSettings(max_step=0.0)
    with pytest.raises(ValueError):
        PropagatorSettings(reference_tolerance=1e-16)
    with pytest.raises(ValueError):
        PropagatorSettings(reference_method="BDF")


def test_sine_driven_z_matches_the_closed_form():
    # H = sin(t) Z commutes with itself -> U(1) = diag(e^-i theta, e^i theta), theta = 1 - cos 1
    hamiltonian = ControlledHamiltonian(np.zeros((2, 2)), [(Z, 0)])
    ansatz = FourierAnsatz(1.0, 1, 1)
    alpha = FourierAnsatz.pack([[1.0]], [[1.0]], [[0.0]])
    theta = 1.0 - math.cos(1.0)
    expected = np.diag([np.exp(-1j * theta), np.exp(1j * theta)])
    assert frobenius_norm(propagate(hamiltonian, ansatz, alpha, 1.0).propagator - expected) < 1e-12


@pytest.mark.parametrize("value, duration", [(1.0, 1.0), (0.7, 2.0), (-1.3, 0.5)])
def test_constant_x_drive_gradient_matches_the_closed_form(value, duration):
    # H = a X -> dU/da = -i T X exp(-i a T X)
    hamiltonian = ControlledHamiltonian(np.zeros((2, 2)), [(X, 0)])
    ansatz = PwcAnsatz(duration, 1, 1)
    result = propagate(hamiltonian, ansatz, np.array([value]), duration, with_gradient=True)
    final = expm(-1j * value * duration * X)
    assert frobenius_norm(result.propagator - final) < 1e-12
    assert np.max(np.abs(result.gradients[0] - (-1j * duration * X @ final))) < 1e-10


def test_propagation_composes_over_a_split_interval():
    hamiltonian, ansatz, alpha = random_problem(dim=3, seed=17, duration=2.0)
    full = propagate(hamiltonian, ansatz, alpha, 2.0).propagator
    first = propagate(hamiltonian, ansatz, alpha, 0.8).propagator
    seeded = propagate(hamiltonian, ansatz, alpha, 2.0, initial=first, start=0.8).propagator
    rest = propagate(hamiltonian, ansatz, alpha, 2.0, start=0.8).propagator
    assert frobenius_norm(seeded - full) < 1e-10
    assert frobenius_norm(rest @ first - full) < 1e-10


def test_halving_the_max_step_leaves_the_result_unchanged():
    hamiltonian, ansatz, alpha = random_problem(dim=4, seed=19)
    coarse = propagate(hamiltonian, ansatz, alpha, 1.0, PropagatorSettings(max_step=0.1), with_gradient=True)
    fine = propagate(hamiltonian, ansatz, alpha, 1.0, PropagatorSettings(max_step=0.05), with_gradient=True)
    assert fine.steps >= coarse.steps
    assert frobenius_norm(fine.propagator - coarse.propagator) < 1e-10
    assert np.max(np.abs(fine.gradients - coarse.gradients)) < 1e-10


def test_three_qubit_problem_matches_the_tight_reference():
    hamiltonian, ansatz, alpha, _ = pwc_study_problem(PwcStudySpec())
    taylor = propagate(hamiltonian, ansatz, alpha, 1.0).propagator
    reference = reference_propagate(hamiltonian, ansatz, alpha, 1.0, tolerance=1e-14)
    assert taylor.shape == (8, 8)
    assert frobenius_norm(taylor - reference) < 1e-11
    assert unitarity_defect(taylor) < 1e-10


def seeded_gradient_problem(seed):
    rng = np.random.default_rng(seed)
    dim = (2, 4, 8)[seed % 3]
    n_controls, n_terms = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    hamiltonian = ControlledHamiltonian(
        random_hermitian(dim, derive_seed(seed, 0)),
        [(random_hermitian(dim, derive_seed(seed, 1, k)), k) for k in range(n_controls)],
    )
    shape = (n_controls, n_terms)
    amplitudes = rng.choice([-1.0, 1.0], shape) * rng.uniform(0.2, 1.0, shape)
    ansatz = FourierAnsatz(1.0, n_controls, n_terms)
    alpha = FourierAnsatz.pack(amplitudes, rng.uniform(0.5, 6.0, shape), rng.uniform(0.0, 2 * math.pi, shape))
    return hamiltonian, ansatz, alpha


def relative_gradient_errors(seed):
    hamiltonian, ansatz, alpha = seeded_gradient_problem(seed)
    assert ansatz.n_trainable <= 20
    exact = propagate(hamiltonian, ansatz, alpha, 1.0, with_gradient=True).gradients
    difference = finite_difference_gradients(hamiltonian, ansatz, alpha, 1.0, h=1e-6)
    return [
        frobenius_norm(exact[slot] - difference[slot]) / max(frobenius_norm(difference[slot]), 1e-4)
        for slot in range(ansatz.n_trainable)
    ]


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10 ** 6))
def test_gradient_matches_finite_differences_on_random_problems(seed):
    assert max(relative_gradient_errors(seed)) <= 1e-5


@pytest.mark.slow
def test_gradient_exactness_over_a_hundred_seeded_problems():
    errors = [error for seed in range(100) for error in relative_gradient_errors(seed)]
    assert max(errors) <= 1e-5
    assert float(np.median(errors)) <= 1e-7
