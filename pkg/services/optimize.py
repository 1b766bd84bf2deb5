"""
Optimize Module - Searches over the control parameters

GOAT proper runs scipy's BFGS (Wolfe line search) on the exact gradient
from the joint propagation; the baseline runs scipy's Nelder-Mead on the
same goal without gradients. Both produce the same trace schema.
"""

import logging
import math
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from services.controls import AMPLITUDE, FREQUENCY, PHASE, VALUE, WIDTH, ControlAnsatz
from services.densemath import derive_seed
from services.errors import DimensionMismatchError, NonConvergenceError, SingularOverlapError
from services.objective import Goal
from services.propagation import ControlledHamiltonian, PropagatorSettings, propagate, reference_run

logger = logging.getLogger(__name__)

CONVERGED = "converged"
ITERATION_CAP = "iteration-cap"
TIME_CAP = "time-cap"
SINGULAR_OVERLAP = "singular-overlap"
LINE_SEARCH_FAILURE = "line-search-failure"
DEGENERATE_SIMPLEX = "degenerate-simplex"
STATIONARY_POINT = "stationary-point"
NO_FREE_PARAMETERS = "no-free-parameters"
PROPAGATION_FAILURE = "propagation-failure"

CAP_STATUSES = (ITERATION_CAP, TIME_CAP)

# Simplex diameter below which Nelder-Mead is considered collapsed
SIMPLEX_COLLAPSE = 1e-14
# A BFGS exit above the threshold with |grad| at or below this is a stationary point
STATIONARY_GRADIENT = 1e-3

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class IterationRecord:
    iteration: int
    parameters: np.ndarray
    value: float
    gradient_norm: float
    evaluations: int
    hamiltonian_evaluations: int
    seconds: float


@dataclass
class OptimizationTrace:
    method: str
    records: List[IterationRecord] = field(default_factory=list)
    status: str = ""
    parameters: Optional[np.ndarray] = None
    value: float = math.inf
    evaluations: int = 0
    message: str = ""
    # completed optimizer iterations (callback count), not records
    iterations: int = 0

    @property
    def seconds(self) -> float:
        return self.records[-1].seconds if self.records else 0.0

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def best_values(self) -> np.ndarray:
        """Best-so-far goal value per record."""
        return np.minimum.accumulate([record.value for record in self.records])

    def time_to_threshold(self, threshold: float) -> Optional[float]:
        for record in self.records:
            if record.value <= threshold:
                return record.seconds
        return None

    def to_rows(self) -> List[Dict]:
        return [
            {
                "iteration": record.iteration,
                "g": record.value,
                "gradient_norm": record.gradient_norm,
                "evaluations": record.evaluations,
                "hamiltonian_evaluations": record.hamiltonian_evaluations,
                "seconds": record.seconds,
            }
            for record in self.records
        ]


@dataclass(eq=False)
class OptimizationProblem:
    hamiltonian: ControlledHamiltonian
    ansatz: ControlAnsatz
    goal: Goal
    duration: float
    initial_parameters: np.ndarray
    settings: PropagatorSettings = field(default_factory=PropagatorSettings)
    threshold: float = 1e-10
    max_iterations: int = 1000
    max_seconds: Optional[float] = None
    # (n_parameters, 2) lower/upper bounds over the full layout
    bounds: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        self.initial_parameters = self.ansatz.check_parameters(self.initial_parameters).copy()
        self.hamiltonian.check_ansatz(self.ansatz)
        if self.goal.dim != self.hamiltonian.dim:
            raise DimensionMismatchError(self.hamiltonian.dim, self.goal.dim, "goal")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0 < self.threshold < 1:
            raise ValueError("goal threshold must lie in (0, 1)")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.bounds is not None:
            self.bounds = np.asarray(self.bounds, dtype=float)
            if self.bounds.shape != (self.ansatz.n_parameters, 2):
                raise ValueError("bounds must have shape (n_parameters, 2)")

    def trainable_bounds(self) -> Optional[np.ndarray]:
        if self.bounds is None:
            return None
        return self.bounds[self.ansatz.trainable_indices]


class GoalFunction:
    """Goal value and gradient as a function of the trainable sub-vector."""

    def __init__(self, problem: OptimizationProblem):
        self.problem = problem
        self.base = problem.initial_parameters.copy()
        self.indices = problem.ansatz.trainable_indices
        self.hamiltonian_evaluations = 0
        self._initial = problem.goal.initial_block()

    def expand(self, x: np.ndarray) -> np.ndarray:
        alpha = self.base.copy()
        alpha[self.indices] = x
        return alpha

    def evaluate(self, x: np.ndarray, with_gradient: bool = True):
        problem = self.problem
        result = propagate(problem.hamiltonian, problem.ansatz, self.expand(x), problem.duration,
                           problem.settings, with_gradient=with_gradient, initial=self._initial)
        self.hamiltonian_evaluations += result.hamiltonian_evaluations
        return problem.goal.evaluate(result.propagator, result.gradients if with_gradient else None)

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        evaluation = self.evaluate(x)
        return evaluation.value, evaluation.gradient

    def value(self, x: np.ndarray) -> float:
        return self.evaluate(x, with_gradient=False).value


class _Stop(Exception):
    def __init__(self, status: str):
        self.status = status
        super().__init__(status)


class _Monitor:
    """Counts, caches and records evaluations; raises _Stop on threshold or time cap."""

    def __init__(self, objective: Callable, threshold: float, max_seconds: Optional[float],
                 bounds: Optional[np.ndarray], cost: Optional[Callable[[], int]], with_gradient: bool):
        self.objective = objective
        self.threshold = threshold
        self.max_seconds = max_seconds
        self.bounds = bounds
        self.cost = cost
        self.with_gradient = with_gradient
        self.started = time.perf_counter()
        self.evaluations = 0
        self.iterations = 0
        self.records: List[IterationRecord] = []
        self.best_value = math.inf
        self.best_x = None
        self._cache: "OrderedDict[bytes, Tuple[float, Optional[np.ndarray]]]" = OrderedDict()

    def elapsed(self) -> float:
        return time.perf_counter() - self.started

    def project(self, x) -> np.ndarray:
        x = np.array(x, dtype=float)
        if self.bounds is not None:
            x = np.clip(x, self.bounds[:, 0], self.bounds[:, 1])
        return x

    def _lookup(self, x: np.ndarray):
        key = x.tobytes()
        if key in self._cache:
            return self._cache[key]
        if self.with_gradient:
            value, gradient = self.objective(x)
            gradient = np.asarray(gradient, dtype=float)
        else:
            value, gradient = float(self.objective(x)), None
        self.evaluations += 1
        self._cache[key] = (float(value), gradient)
        if len(self._cache) > 64:
            self._cache.popitem(last=False)
        if value < self.best_value:
            self.best_value, self.best_x = float(value), x.copy()
        return float(value), gradient

    def evaluate(self, x):
        x = self.project(x)
        value, gradient = self._lookup(x)
        if value <= self.threshold:
            self.record(x)
            raise _Stop(CONVERGED)
        if self.max_seconds is not None and self.elapsed() > self.max_seconds:
            self.record(x)
            raise _Stop(TIME_CAP)
        return (value, gradient) if self.with_gradient else value

    def record(self, x):
        x = self.project(x)
        value, gradient = self._lookup(x)
        norm = float(np.linalg.norm(gradient)) if gradient is not None else math.nan
        self.records.append(IterationRecord(
            iteration=self.iterations,
            parameters=x.copy(),
            value=value,
            gradient_norm=norm,
            evaluations=self.evaluations,
            hamiltonian_evaluations=self.cost() if self.cost else self.evaluations,
            seconds=self.elapsed(),
        ))
        logger.debug("iteration %d: g=%.3e |grad|=%.3e", self.iterations, value, norm)

    def callback(self, xk, *args):
        self.iterations += 1
        self.record(xk)
        if self.max_seconds is not None and self.elapsed() > self.max_seconds:
            raise _Stop(TIME_CAP)

    def finish(self, trace: OptimizationTrace) -> OptimizationTrace:
        trace.records = self.records
        trace.evaluations = self.evaluations
        trace.iterations = self.iterations
        if self.best_x is not None:
            trace.parameters, trace.value = self.best_x, self.best_value
        return trace


def _run_guarded(monitor: _Monitor, trace: OptimizationTrace, body: Callable[[], Tuple[str, str]]):
    try:
        trace.status, trace.message = body()
    except _Stop as stop:
        trace.status, trace.message = stop.status, ""
    except SingularOverlapError as exc:
        trace.status, trace.message = SINGULAR_OVERLAP, str(exc)
    except NonConvergenceError as exc:
        trace.status, trace.message = PROPAGATION_FAILURE, str(exc)
    return monitor.finish(trace)


def minimize_bfgs(objective: Objective, x0, threshold: float, max_iterations: int,
                  max_seconds: Optional[float] = None, bounds: Optional[np.ndarray] = None,
                  cost: Optional[Callable[[], int]] = None, gtol: float = 1e-12) -> OptimizationTrace:
    """
    Quasi-Newton descent with scipy's BFGS and its Wolfe line search.

    Stops as soon as an evaluated goal value reaches ``threshold``.
    """
    monitor = _Monitor(objective, threshold, max_seconds, bounds, cost, with_gradient=True)
    trace = OptimizationTrace(method="goat")
    x0 = monitor.project(x0)

    def body():
        monitor.evaluate(x0)
        monitor.record(x0)
        if x0.size == 0:
            return NO_FREE_PARAMETERS, "no trainable parameters"
        if max_iterations == 0:
            return ITERATION_CAP, "iteration cap reached after the initial evaluation"
        result = minimize(monitor.evaluate, x0, jac=True, method="BFGS", callback=monitor.callback,
                          options={"maxiter": max_iterations, "gtol": gtol})
        if result.status == 1:
            return ITERATION_CAP, result.message
        norm = float(np.linalg.norm(result.jac))
        message = f"{result.message} (|grad|={norm:.3e})"
        if result.status == 0 or norm <= STATIONARY_GRADIENT:
            return STATIONARY_POINT, message
        return LINE_SEARCH_FAILURE, message

    return _run_guarded(monitor, trace, body)


def minimize_nelder_mead(objective: Callable[[np.ndarray], float], x0, threshold: float,
                         max_iterations: int, max_seconds: Optional[float] = None,
                         bounds: Optional[np.ndarray] = None, cost: Optional[Callable[[], int]] = None,
                         max_evaluations: Optional[int] = None) -> OptimizationTrace:
    """
    Derivative-free simplex search with scipy's Nelder-Mead.

    Standard coefficients (reflection 1, expansion 2, contraction 0.5, shrink 0.5).
    """
    monitor = _Monitor(objective, threshold, max_seconds, bounds, cost, with_gradient=False)
    trace = OptimizationTrace(method="nelder-mead")
    x0 = monitor.project(x0)

    def body():
        monitor.evaluate(x0)
        monitor.record(x0)
        if x0.size == 0:
            return NO_FREE_PARAMETERS, "no trainable parameters"
        if max_iterations == 0:
            return ITERATION_CAP, "iteration cap reached after the initial evaluation"
        options = {"maxiter": max_iterations, "xatol": SIMPLEX_COLLAPSE, "fatol": math.inf, "adaptive": False}
        if max_evaluations is not None:
            options["maxfev"] = max_evaluations
        result = minimize(monitor.evaluate, x0, method="Nelder-Mead", callback=monitor.callback, options=options)
        if result.status == 0:
            return DEGENERATE_SIMPLEX, "simplex collapsed above the goal threshold"
        return ITERATION_CAP, result.message

    return _run_guarded(monitor, trace, body)


def _expand_trace(trace: OptimizationTrace, goal_function: GoalFunction) -> OptimizationTrace:
    if trace.parameters is not None:
        trace.parameters = goal_function.expand(trace.parameters)
    for record in trace.records:
        record.parameters = goal_function.expand(record.parameters)
    return trace


def goat_optimize(problem: OptimizationProblem) -> OptimizationTrace:
    """Gradient-based optimisation of the analytic controls (BFGS on exact gradients)."""
    goal_function = GoalFunction(problem)
    x0 = problem.initial_parameters[goal_function.indices]
    logger.info("GOAT: %d trainable slots, threshold %.1e", x0.size, problem.threshold)
    trace = minimize_bfgs(goal_function, x0, problem.threshold, problem.max_iterations,
                          problem.max_seconds, problem.trainable_bounds(),
                          cost=lambda: goal_function.hamiltonian_evaluations)
    logger.info("GOAT finished: %s, g=%.3e after %d iterations", trace.status, trace.value, trace.iterations)
    return _expand_trace(trace, goal_function)


def nelder_mead_optimize(problem: OptimizationProblem, max_evaluations: Optional[int] = None) -> OptimizationTrace:
    """Nelder-Mead on the identical goal, without gradients."""
    goal_function = GoalFunction(problem)
    x0 = problem.initial_parameters[goal_function.indices]
    logger.info("Nelder-Mead: %d trainable slots, threshold %.1e", x0.size, problem.threshold)
    trace = minimize_nelder_mead(goal_function.value, x0, problem.threshold, problem.max_iterations,
                                 problem.max_seconds, problem.trainable_bounds(),
                                 cost=lambda: goal_function.hamiltonian_evaluations,
                                 max_evaluations=max_evaluations)
    logger.info("Nelder-Mead finished: %s, g=%.3e after %d iterations", trace.status, trace.value, trace.iterations)
    return _expand_trace(trace, goal_function)


@dataclass(frozen=True)
class InitialisationSettings:
    amplitude_range: Tuple[float, float] = (-1.0, 1.0)
    frequency_band: Tuple[float, float] = (0.1, 10.0)
    phase_range: Tuple[float, float] = (0.0, 2 * math.pi)
    width_range: Tuple[float, float] = (0.5, 1.5)


def random_initial_parameters(ansatz: ControlAnsatz, base, seed: int,
                              settings: InitialisationSettings = InitialisationSettings()) -> np.ndarray:
    """Redraw the trainable slots of ``base``; frozen slots keep their values."""
    rng = np.random.default_rng(seed)
    alpha = ansatz.check_parameters(base).copy()
    low_f, high_f = settings.frequency_band
    for index in ansatz.trainable_indices:
        kind = ansatz.layout[index].kind
        if kind in (AMPLITUDE, VALUE):
            alpha[index] = rng.uniform(*settings.amplitude_range)
        elif kind == FREQUENCY:
            alpha[index] = math.exp(rng.uniform(math.log(low_f), math.log(high_f)))
        elif kind == PHASE:
            alpha[index] = rng.uniform(*settings.phase_range)
        elif kind == WIDTH:
            alpha[index] = rng.uniform(*settings.width_range)
    return alpha


@dataclass
class MultistartResult:
    best: OptimizationTrace
    summaries: List[Dict]
    successes: int
    starts: int

    @property
    def success_fraction(self) -> float:
        return self.successes / self.starts if self.starts else 0.0


def _run_start(problem: OptimizationProblem) -> OptimizationTrace:
    return goat_optimize(problem)


def multistart(problem: OptimizationProblem, starts: int, seed: int, workers: int = 1,
               init: InitialisationSettings = InitialisationSettings(),
               stop_on_success: bool = False) -> MultistartResult:
    """
    Run GOAT from ``starts`` initial points and keep the best trace.

    Start 0 uses the problem's own initial parameters; later starts redraw the
    trainable slots from ``derive_seed(seed, start)``. Failures are counted.
    With ``stop_on_success`` the starts run one after another and stop at the
    first converged one; ``starts`` on the result is then the number used.
    """
    if starts < 1:
        raise ValueError("starts must be >= 1")
    problems = [problem] + [
        replace(problem, initial_parameters=random_initial_parameters(
            problem.ansatz, problem.initial_parameters, derive_seed(seed, start), init))
        for start in range(1, starts)
    ]
    if stop_on_success:
        traces = []
        for start_problem in problems:
            traces.append(_run_start(start_problem))
            if traces[-1].converged:
                break
    elif workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_run_start, problems))
    else:
        traces = [_run_start(p) for p in problems]

    summaries = []
    for start, trace in enumerate(traces):
        summaries.append({
            "start": start,
            "seed": seed if start == 0 else derive_seed(seed, start),
            "status": trace.status,
            "g": trace.value,
            "iterations": trace.iterations,
            "seconds": trace.seconds,
        })
        logger.info("start %d: %s g=%.3e", start, trace.status, trace.value)
    best = min(traces, key=lambda trace: trace.value)
    successes = sum(1 for trace in traces if trace.value <= problem.threshold)
    return MultistartResult(best=best, summaries=summaries, successes=successes, starts=len(traces))


def reference_check(problem: OptimizationProblem, parameters) -> Dict:
    """
    Goal value at ``parameters`` recomputed with the adaptive reference integrator.

    Tolerance and method come from ``problem.settings``.
    """
    settings = problem.settings
    run = reference_run(problem.hamiltonian, problem.ansatz, parameters, problem.duration,
                        settings.reference_tolerance, settings.reference_method,
                        initial=problem.goal.initial_block())
    g_reference = problem.goal.evaluate(run.propagator).value
    logger.info("reference check (%s, rtol %.1e): g=%.3e", settings.reference_method, run.details["rtol"], g_reference)
    return {"g_reference": g_reference, "reference_evaluations": run.evaluations, "reference": run.details}


DEFAULT_GROUPS = ((AMPLITUDE, VALUE), (FREQUENCY, PHASE, WIDTH))


def alternating_optimize(problem: OptimizationProblem, groups: Sequence[Sequence[str]] = DEFAULT_GROUPS,
                         rounds: int = 3) -> OptimizationTrace:
    """
    Alternate GOAT runs over subsets of slot kinds, e.g. amplitudes then frequencies.

    Each run starts where the previous one ended; the returned trace
    concatenates all runs with cumulative counters.
    """
    combined = OptimizationTrace(method="goat-alternating")
    current = problem.initial_parameters.copy()
    seconds = 0.0
    evaluations = 0
    hamiltonian_evaluations = 0
    for round_index in range(rounds):
        for group in groups:
            mask = problem.ansatz.trainable & problem.ansatz.kind_mask(group)
            if not mask.any():
                continue
            sub = replace(problem, ansatz=problem.ansatz.with_trainable(mask), initial_parameters=current)
            trace = goat_optimize(sub)
            for record in trace.records:
                combined.records.append(replace(
                    record,
                    iteration=record.iteration + combined.iterations,
                    evaluations=record.evaluations + evaluations,
                    hamiltonian_evaluations=record.hamiltonian_evaluations + hamiltonian_evaluations,
                    seconds=record.seconds + seconds,
                ))
            if trace.records:
                seconds += trace.records[-1].seconds
                hamiltonian_evaluations += trace.records[-1].hamiltonian_evaluations
            evaluations += trace.evaluations
            combined.iterations += trace.iterations
            if trace.parameters is not None and trace.value <= combined.value:
                current, combined.value = trace.parameters, trace.value
            combined.status, combined.message = trace.status, f"round {round_index}, kinds {list(group)}"
            if trace.converged:
                combined.parameters, combined.evaluations = current, evaluations
                return combined
    combined.parameters, combined.evaluations = current, evaluations
    return combined


GRADIENT_TOLERANCE = 1e-5
# Denominator floor for relative errors of slots whose derivative vanishes
GRADIENT_FLOOR = 1e-4


def gradient_check(problem: OptimizationProblem, step: float = 1e-6,
                   tolerance: float = GRADIENT_TOLERANCE) -> Dict:
    """
    Compare the propagated dU/dalpha_s with central finite differences, slot by slot.

    Args:
        problem: system, ansatz, goal and the parameters to check at
        step: finite-difference step h
        tolerance: largest relative Frobenius error that still passes

    Returns:
        dict: report with ``status`` ("passed" or "failed"), ``max_error`` and per-slot rows

    Raises:
        SingularOverlapError: the gate overlap vanishes at the checked point
    """
    ansatz = problem.ansatz
    alpha = problem.initial_parameters
    initial = problem.goal.initial_block()

    def final(parameters):
        return propagate(problem.hamiltonian, ansatz, parameters, problem.duration,
                         problem.settings, initial=initial).propagator

    exact = propagate(problem.hamiltonian, ansatz, alpha, problem.duration, problem.settings,
                      with_gradient=True, initial=initial)
    evaluation = problem.goal.evaluate(exact.propagator, exact.gradients)

    slots = []
    for position, index in enumerate(ansatz.trainable_indices):
        plus, minus = alpha.copy(), alpha.copy()
        plus[index] += step
        minus[index] -= step
        u_plus, u_minus = final(plus), final(minus)
        difference = (u_plus - u_minus) / (2 * step)
        error = np.linalg.norm(exact.gradients[position] - difference) / max(np.linalg.norm(difference), GRADIENT_FLOOR)
        goal_difference = (problem.goal.evaluate(u_plus).value - problem.goal.evaluate(u_minus).value) / (2 * step)
        goal_error = abs(evaluation.gradient[position] - goal_difference) / max(abs(goal_difference), GRADIENT_FLOOR)
        descriptor = ansatz.layout[index]
        slots.append({
            "slot": int(index),
            "control": descriptor.control,
            "term": descriptor.term,
            "kind": descriptor.kind,
            "propagator_error": float(error),
            "goal_gradient": float(evaluation.gradient[position]),
            "goal_difference": float(goal_difference),
            "goal_error": float(goal_error),
        })

    max_error = max((row["propagator_error"] for row in slots), default=0.0)
    status = "passed" if max_error <= tolerance else "failed"
    logger.info("gradient check: %d slots, max relative error %.3e (%s)", len(slots), max_error, status)
    return {
        "status": status,
        "max_error": max_error,
        "tolerance": tolerance,
        "step": step,
        "g": evaluation.value,
        "slots": slots,
    }
