"""
Propagation Module - Time evolution of U(alpha, t) and its parameter gradient

Implements the Taylor relay propagator for dU/dt = -i H(t) U together with
the coupled gradient equation of motion, a Dormand-Prince reference
integrator (scipy), and the piecewise-constant baseline propagator.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import binom

from services.controls import DEFAULT_MAX_ORDER, ControlAnsatz
from services.densemath import (
    as_complex_matrix, expm, frobenius_norm, is_hermitian, ordered_product,
)
from services.errors import (
    BoundaryDerivativeError, DimensionMismatchError, InvalidMatrixError,
    NonConvergenceError, StepTooLargeError,
)

logger = logging.getLogger(__name__)

MAX_TAYLOR_ORDER = DEFAULT_MAX_ORDER
SAMPLING_RULES = ("start", "midpoint")
# solve_ivp methods that integrate complex states
REFERENCE_METHODS = ("RK45", "RK23", "DOP853")
MIN_REFERENCE_TOLERANCE = 1e-15

_ORDERS = np.arange(MAX_TAYLOR_ORDER + 1)
_BINOMIAL = binom(_ORDERS[:, None], _ORDERS[None, :])
_FACTORIAL = np.array([math.factorial(k) for k in _ORDERS], dtype=float)

# Relative step-size floor below which propagation gives up
_STEP_FLOOR = 1e-12
# Pieces shorter than this are skipped
_PIECE_EPS = 1e-15


class ControlledHamiltonian:
    """
    H(alpha, t) = H0 + sum_l c_{k_l}(alpha, t) H_l.

    ``controls`` pairs each Hermitian operator with the index of the ansatz
    control that modulates it; several operators may share one control.
    """

    def __init__(self, drift, controls: Sequence[Tuple[np.ndarray, int]]):
        self.drift = as_complex_matrix(drift, "drift")
        if not is_hermitian(self.drift):
            raise InvalidMatrixError("drift Hamiltonian is not Hermitian")
        dim = self.drift.shape[0]
        operators, indices = [], []
        for position, (operator, control) in enumerate(controls):
            operator = as_complex_matrix(operator, f"control[{position}]")
            if operator.shape[0] != dim:
                raise DimensionMismatchError(dim, operator.shape[0], f"control[{position}]")
            if not is_hermitian(operator):
                raise InvalidMatrixError(f"control[{position}] Hamiltonian is not Hermitian")
            if int(control) < 0:
                raise InvalidMatrixError(f"control[{position}] has a negative control index")
            operators.append(operator)
            indices.append(int(control))
        self.operators = np.array(operators, dtype=complex).reshape(len(operators), dim, dim)
        self.control_indices = np.array(indices, dtype=int)

    @property
    def dim(self) -> int:
        return self.drift.shape[0]

    @property
    def n_controls(self) -> int:
        return int(self.control_indices.max()) + 1 if self.control_indices.size else 0

    def check_ansatz(self, ansatz: ControlAnsatz):
        if self.n_controls > ansatz.n_controls:
            raise DimensionMismatchError(self.n_controls, ansatz.n_controls, "control count")

    def derivative_stack(self, coefficients: np.ndarray) -> np.ndarray:
        """d^n H / dt^n for n = 0..N-1 from a (C, N) coefficient table."""
        stack = np.einsum("ln,lij->nij", coefficients[self.control_indices], self.operators)
        stack[0] += self.drift
        return stack

    def gradient_stack(self, gradient_coefficients: np.ndarray) -> np.ndarray:
        """d^n/dt^n dH/dalpha_s, shape (a, N, dim, dim)."""
        return np.einsum("sln,lij->snij", gradient_coefficients[:, self.control_indices], self.operators)

    def control_part(self, values: np.ndarray) -> np.ndarray:
        """sum_l c_{k_l} H_l for control values of shape (C,) or (C, M)."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            return np.tensordot(values[self.control_indices], self.operators, axes=1)
        return np.einsum("lm,lij->mij", values[self.control_indices], self.operators)

    def at(self, values: np.ndarray) -> np.ndarray:
        """H for control values (C,), or a stack of H for values (C, M)."""
        return self.drift + self.control_part(values)


@dataclass(frozen=True)
class PropagatorSettings:
    order: int = 12
    step_tolerance: float = 1e-14
    max_step: Optional[float] = None
    reference_tolerance: float = 1e-14
    reference_method: str = "RK45"
    growth: float = 1.5

    def __post_init__(self):
        if not 2 <= self.order <= MAX_TAYLOR_ORDER:
            raise ValueError(f"Taylor order must lie in 2..{MAX_TAYLOR_ORDER}")
        if self.step_tolerance <= 0:
            raise ValueError("step tolerance must be positive")
        if self.reference_tolerance < MIN_REFERENCE_TOLERANCE:
            raise ValueError(f"reference tolerance must be >= {MIN_REFERENCE_TOLERANCE:g}")
        if self.reference_method not in REFERENCE_METHODS:
            raise ValueError(f"reference method must be one of {REFERENCE_METHODS}")
        if self.max_step is not None and self.max_step <= 0:
            raise ValueError("max_step must be positive")
        if self.growth <= 1:
            raise ValueError("growth factor must exceed 1")


@dataclass
class PropagationResult:
    propagator: np.ndarray
    gradients: np.ndarray
    steps: int = 0
    hamiltonian_evaluations: int = 0
    rejected_steps: int = 0
    matrix_products: int = 0


class _TaylorStack:
    """Time derivatives of U (and optionally dU/dalpha) at the start of one step."""

    def __init__(self, hamiltonian: ControlledHamiltonian, ansatz: ControlAnsatz, alpha,
                 t0: float, u0: np.ndarray, order: int, piece: int,
                 g0: Optional[np.ndarray] = None):
        self.order = order
        h_stack = hamiltonian.derivative_stack(ansatz.coefficients(alpha, t0, order - 1, piece))
        u = np.empty((order + 1,) + u0.shape, dtype=complex)
        u[0] = u0
        for k in range(1, order + 1):
            weights = _BINOMIAL[k - 1, :k]
            u[k] = -1j * np.tensordot(weights, h_stack[k - 1::-1] @ u[:k], axes=1)
        self.u = u
        self.products = order * (order + 1) // 2
        self.g = None
        if g0 is not None:
            dh_stack = hamiltonian.gradient_stack(
                ansatz.gradient_coefficients(alpha, t0, order - 1, piece)
            )
            g = np.empty((g0.shape[0], order + 1) + u0.shape, dtype=complex)
            g[:, 0] = g0
            for k in range(1, order + 1):
                weights = _BINOMIAL[k - 1, :k]
                mixed = dh_stack[:, k - 1::-1] @ u[:k]
                carried = h_stack[k - 1::-1] @ g[:, :k]
                g[:, k] = -1j * np.tensordot(mixed + carried, weights, axes=([1], [0]))
            self.g = g
            self.products += g0.shape[0] * order * (order + 1)

    def _weights(self, dt: float) -> np.ndarray:
        return dt ** _ORDERS[: self.order + 1] / _FACTORIAL[: self.order + 1]

    def residual(self, dt: float) -> float:
        """Norm of the last Taylor term, guarded by the one before it."""
        weights = self._weights(dt)
        last = weights[-1] * frobenius_norm(self.u[-1])
        previous = weights[-2] * frobenius_norm(self.u[-2])
        return max(last, previous / self.order)

    def advance(self, dt: float) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        weights = self._weights(dt)
        u = np.tensordot(weights, self.u, axes=1)
        g = None if self.g is None else np.tensordot(self.g, weights, axes=([1], [0]))
        return u, g


def _locate_step(ansatz: ControlAnsatz, alpha, t0: float, dt: float) -> int:
    for index, (start, end) in enumerate(ansatz.pieces(alpha)):
        if start - 1e-12 <= t0 and t0 + dt <= end + 1e-12 and end > start:
            return index
    raise BoundaryDerivativeError(t0, 1)


def _check_inputs(hamiltonian: ControlledHamiltonian, ansatz: ControlAnsatz, alpha, settings):
    alpha = ansatz.check_parameters(alpha)
    hamiltonian.check_ansatz(ansatz)
    if settings.order > ansatz.max_order:
        raise ValueError(f"Taylor order {settings.order} exceeds the ansatz derivative cap {ansatz.max_order}")
    return alpha


def taylor_step(hamiltonian: ControlledHamiltonian, ansatz: ControlAnsatz, alpha, t0: float,
                dt: float, u0: np.ndarray, settings: PropagatorSettings = PropagatorSettings()) -> np.ndarray:
    """
    One local Taylor expansion U(t0 + dt) = sum_k dt^k/k! d^kU/dt^k at t0.

    Raises:
        StepTooLargeError: the truncation residual exceeds the step tolerance
        BoundaryDerivativeError: [t0, t0 + dt] crosses a piece boundary
    """
    u, _ = taylor_step_with_gradient(hamiltonian, ansatz, alpha, t0, dt, u0, None, settings)
    return u


def taylor_step_with_gradient(hamiltonian: ControlledHamiltonian, ansatz: ControlAnsatz, alpha,
                              t0: float, dt: float, u0: np.ndarray, g0: Optional[np.ndarray],
                              settings: PropagatorSettings = PropagatorSettings()
                              ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Advance U and every dU/dalpha_s through one step sharing the U-derivative stack."""
    alpha = _check_inputs(hamiltonian, ansatz, alpha, settings)
    u0 = np.asarray(u0, dtype=complex)
    if g0 is not None:
        g0 = np.asarray(g0, dtype=complex)
        if g0.shape != (ansatz.n_trainable,) + u0.shape:
            raise DimensionMismatchError(ansatz.n_trainable, g0.shape[0], "gradient stack")
    piece = _locate_step(ansatz, alpha, t0, dt)
    stack = _TaylorStack(hamiltonian, ansatz, alpha, t0, u0, settings.order, piece, g0)
    tolerance = settings.step_tolerance * frobenius_norm(u0)
    residual = stack.residual(dt)
    if residual > tolerance:
        raise StepTooLargeError(residual, tolerance)
    return stack.advance(dt)


def _clipped_pieces(ansatz: ControlAnsatz, alpha, start: float, end: float):
    for index, (a, b) in enumerate(ansatz.pieces(alpha)):
        yield index, max(a, start), min(b, end), b


def propagate(hamiltonian: ControlledHamiltonian, ansatz: ControlAnsatz, alpha, duration: float,
              settings: PropagatorSettings = PropagatorSettings(), with_gradient: bool = False,
              initial: Optional[np.ndarray] = None, start: float = 0.0) -> PropagationResult:
    """
    Relay-race Taylor propagation from ``start`` to ``duration``.

    Steps are split at every analytic-piece boundary. A rejected step halves
    dt reusing the same derivative stack; an accepted step grows dt by
    ``settings.growth`` up to ``settings.max_step``.

    Args:
        hamiltonian: drift and control operators
        ansatz: control family
        alpha: full parameter vector
        duration: final time T
        settings: Taylor order, step tolerance and step cap
        with_gradient: also propagate dU/dalpha_s for every trainable slot
        initial: block U(start) (default identity); a (dim, 1) column propagates a state
        start: initial time

    Returns:
        PropagationResult: U(T), the gradient stack and cost counters
    """
    alpha = _check_inputs(hamiltonian, ansatz, alpha, settings)
    if duration <= 0 or not 0.0 <= start < duration:
        raise ValueError("need 0 <= start < duration")
    if duration > ansatz.duration + 1e-12:
        raise ValueError(f"duration {duration} exceeds the ansatz horizon {ansatz.duration}")

    u = np.eye(hamiltonian.dim, dtype=complex) if initial is None else np.array(initial, dtype=complex)
    if u.ndim != 2 or u.shape[0] != hamiltonian.dim:
        raise DimensionMismatchError(hamiltonian.dim, u.shape[0], "initial block")
    g = np.zeros((ansatz.n_trainable,) + u.shape, dtype=complex) if with_gradient else None
    sensitivities = ansatz.boundary_sensitivities(alpha) if with_gradient else None

    max_step = settings.max_step or (duration - start)
    floor = _STEP_FLOOR * duration
    dt = max_step
    result = PropagationResult(propagator=u, gradients=g)
    pieces = list(_clipped_pieces(ansatz, alpha, start, duration))

    for index, lo, hi, boundary in pieces:
        t = lo
        while hi - t > _PIECE_EPS:
            remaining = hi - t
            stack = _TaylorStack(hamiltonian, ansatz, alpha, t, u, settings.order, index, g)
            result.hamiltonian_evaluations += 1
            result.matrix_products += stack.products
            tolerance = settings.step_tolerance * frobenius_norm(u)
            step = min(dt, remaining)
            residual = stack.residual(step)
            shrunk = False
            while residual > tolerance:
                step /= 2.0
                shrunk = True
                result.rejected_steps += 1
                if step < floor:
                    raise NonConvergenceError(t, residual, "step size underflow")
                residual = stack.residual(step)
                logger.debug("rejected Taylor step at t=%.6g, retrying dt=%.3e", t, step)
            u, g = stack.advance(step)
            result.steps += 1
            t = hi if step >= remaining else t + step
            if shrunk:
                dt = step
            dt = min(dt * settings.growth, max_step)

        if sensitivities is not None and index < len(pieces) - 1 and start < boundary < duration:
            # A moving boundary contributes -i (H_before - H_after) U(tau) per unit shift
            jump = (ansatz.coefficients(alpha, boundary, 0, index)[:, 0]
                    - ansatz.coefficients(alpha, boundary, 0, index + 1)[:, 0])
            kick = -1j * (hamiltonian.control_part(jump) @ u)
            g = g + sensitivities[index][:, None, None] * kick

    result.propagator = u
    result.gradients = g if g is not None else np.zeros((0,) + u.shape, dtype=complex)
    return result


@dataclass
class ReferenceRun:
    propagator: np.ndarray
    evaluations: int = 0
    steps: int = 0
    details: dict = field(default_factory=dict)


def reference_run(hamiltonian: ControlledHamiltonian, ansatz: ControlAnsatz, alpha, duration: float,
                  tolerance: float = 1e-14, method: str = "RK45",
                  initial: Optional[np.ndarray] = None, start: float = 0.0) -> ReferenceRun:
    """Adaptive embedded Runge-Kutta integration of dU/dt = -i H U, piece by piece."""
    alpha = ansatz.check_parameters(alpha)
    hamiltonian.check_ansatz(ansatz)
    if tolerance < MIN_REFERENCE_TOLERANCE:
        raise ValueError(f"reference tolerance must be >= {MIN_REFERENCE_TOLERANCE:g}")
    if method not in REFERENCE_METHODS:
        raise ValueError(f"reference method must be one of {REFERENCE_METHODS}")
    floor = 100 * np.finfo(float).eps
    rtol = tolerance
    if rtol < floor:
        logger.warning("reference tolerance %.1e is below the integrator floor, using %.2e", tolerance, floor)
        rtol = floor
    atol = rtol * 1e-3

    u = np.eye(hamiltonian.dim, dtype=complex) if initial is None else np.array(initial, dtype=complex)
    shape = u.shape
    run = ReferenceRun(propagator=u)
    for index, lo, hi, _ in _clipped_pieces(ansatz, alpha, start, duration):
        if hi - lo <= _PIECE_EPS:
            continue

        def rhs(t, y, piece=index):
            h = hamiltonian.at(ansatz.coefficients(alpha, t, 0, piece)[:, 0])
            return (-1j * (h @ y.reshape(shape))).ravel()

        solution = solve_ivp(rhs, (lo, hi), u.ravel(), method=method, rtol=rtol, atol=atol)
        if not solution.success:
            raise NonConvergenceError(float(solution.t[-1]), None, solution.message)
        u = solution.y[:, -1].reshape(shape)
        run.evaluations += int(solution.nfev)
        run.steps += len(solution.t) - 1

    run.propagator = u
    run.details = {"method": method, "rtol": rtol, "atol": atol}
    return run


def reference_propagate(hamiltonian: ControlledHamiltonian, ansatz: ControlAnsatz, alpha, duration: float,
                        tolerance: float = 1e-14, method: str = "RK45",
                        initial: Optional[np.ndarray] = None) -> np.ndarray:
    """U(T) from the adaptive reference integrator."""
    return reference_run(hamiltonian, ansatz, alpha, duration, tolerance, method, initial).propagator


def pwc_propagate(hamiltonian: ControlledHamiltonian, ansatz: ControlAnsatz, alpha, duration: float,
                  slices: int, sampling: str = "midpoint", initial: Optional[np.ndarray] = None,
                  chunk: int = 1 << 16) -> np.ndarray:
    """
    Piecewise-constant approximation: prod_n expm(-i H(t_n*) T/slices).

    The control is sampled at each slice start or midpoint. Slices are
    exponentiated and multiplied in batches of ``chunk``.
    """
    alpha = ansatz.check_parameters(alpha)
    hamiltonian.check_ansatz(ansatz)
    if slices < 1:
        raise ValueError("slices must be >= 1")
    if sampling not in SAMPLING_RULES:
        raise ValueError(f"sampling must be one of {SAMPLING_RULES}")

    width = duration / slices
    offset = 0.5 if sampling == "midpoint" else 0.0
    total = np.eye(hamiltonian.dim, dtype=complex)
    for first in range(0, slices, chunk):
        indices = np.arange(first, min(first + chunk, slices))
        times = (indices + offset) * width
        stack = hamiltonian.at(ansatz.values(alpha, times))
        total = ordered_product(expm(-1j * width * stack)) @ total
    if initial is not None:
        total = total @ np.asarray(initial, dtype=complex)
    return total
