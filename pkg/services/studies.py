"""
Studies Module - Seeded numerical experiments producing tables

Each study is a pure function of its spec (seeds included) apart from the
wall-clock columns. Results are returned as a StudyResult; writing them to
disk is the caller's job (see storage.py).
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from services.controls import AMPLITUDE, PHASE, FourierAnsatz, PwcAnsatz, sample_controls
from services.densemath import (
    CNOT, derive_seed, pauli_string, random_hermitian, random_state, random_unitary,
)
from services.errors import GoatError
from services.objective import GateGoal, StateGoal, gate_infidelity
from services.optimize import (
    OptimizationProblem, OptimizationTrace, goat_optimize, multistart,
    nelder_mead_optimize, random_initial_parameters, reference_check,
)
from services.propagation import (
    MIN_REFERENCE_TOLERANCE, REFERENCE_METHODS, SAMPLING_RULES, ControlledHamiltonian,
    PropagatorSettings, propagate, pwc_propagate, reference_run,
)

logger = logging.getLogger(__name__)

STUDY_NAMES = ("pwc", "dims", "goat-vs-nm", "cnot-hi")
TASKS = ("state", "gate")
PARAMETRIZATIONS = ("fourier-amplitudes", "pwc", "pwc-flexible")
BENCHMARKS = ("ising-cnot", "nv-cnot-standin")

# Relative errors are divided by max(g_ref, this)
RELATIVE_FLOOR = 1e-16


@dataclass
class StudyResult:
    name: str
    columns: List[str]
    rows: List[Dict]
    traces: Dict[str, OptimizationTrace] = field(default_factory=dict)
    extras: Dict[str, List[Dict]] = field(default_factory=dict)
    summary: Dict = field(default_factory=dict)


def _default_slice_counts() -> Tuple[int, ...]:
    return tuple(int(n) for n in np.unique(np.round(np.logspace(1, 6, 11)).astype(int)))


@dataclass
class PwcStudySpec:
    qubits: int = 3
    seed: int = 0
    slice_counts: Tuple[int, ...] = field(default_factory=_default_slice_counts)
    sampling_rules: Tuple[str, ...] = SAMPLING_RULES
    reference_tolerance: float = 1e-14
    reference_method: str = "RK45"
    task: str = "gate"
    n_controls: int = 2
    n_terms: int = 3
    duration: float = 1.0
    # slopes are fitted over slice counts >= this
    asymptotic_from: int = 1000
    error_target: float = 1e-8

    def __post_init__(self):
        self.slice_counts = tuple(int(n) for n in self.slice_counts)
        self.sampling_rules = tuple(self.sampling_rules)
        if not self.slice_counts or any(n < 1 for n in self.slice_counts):
            raise ValueError("slice counts must be positive")
        if any(b <= a for a, b in zip(self.slice_counts, self.slice_counts[1:])):
            raise ValueError("slice counts must be strictly increasing")
        if set(self.sampling_rules) - set(SAMPLING_RULES):
            raise ValueError(f"sampling rules must be drawn from {SAMPLING_RULES}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.qubits < 1 or self.duration <= 0:
            raise ValueError("need qubits >= 1 and a positive duration")
        if self.reference_tolerance < MIN_REFERENCE_TOLERANCE or self.reference_method not in REFERENCE_METHODS:
            raise ValueError(f"need reference tolerance >= {MIN_REFERENCE_TOLERANCE:g} "
                             f"and a reference method from {REFERENCE_METHODS}")


@dataclass
class DimStudySpec:
    task: str = "state"
    hilbert_dims: Tuple[int, ...] = (2,)
    control_dims: Tuple[int, ...] = (1, 2, 3, 4)
    trials: int = 20
    parametrization: str = "fourier-amplitudes"
    threshold: float = 1e-10
    max_iterations: int = 300
    duration: float = 4.0
    # starts per trial; a trial succeeds if any start converges
    restarts: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.hilbert_dims = tuple(int(d) for d in self.hilbert_dims)
        self.control_dims = tuple(int(n) for n in self.control_dims)
        if self.trials < 1 or self.restarts < 1:
            raise ValueError("trials and restarts must be >= 1")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"parametrization must be one of {PARAMETRIZATIONS}")
        if any(d < 2 for d in self.hilbert_dims) or any(n < 1 for n in self.control_dims):
            raise ValueError("need hilbert dims >= 2 and control dims >= 1")


@dataclass
class BenchmarkProblemSpec:
    name: str = "ising-cnot"
    n_terms: Optional[int] = None
    duration: float = 4.0
    threshold: float = 1e-10
    max_iterations: int = 1000
    seed: int = 0
    starts: int = 20
    nm_time_factor: float = 10.0
    pulse_samples: int = 401
    reference_tolerance: float = 1e-14

    def __post_init__(self):
        if self.name not in BENCHMARKS:
            raise ValueError(f"unknown benchmark problem {self.name!r}; expected one of {BENCHMARKS}")
        if self.duration <= 0 or not 0 < self.threshold < 1:
            raise ValueError("need a positive duration and a threshold in (0, 1)")
        if self.starts < 1:
            raise ValueError("starts must be >= 1")
        if self.reference_tolerance < MIN_REFERENCE_TOLERANCE:
            raise ValueError(f"reference tolerance must be >= {MIN_REFERENCE_TOLERANCE:g}")


def spec_to_dict(spec) -> Dict:
    return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(spec).items()}


# --- PWC discretisation error ------------------------------------------------

def pwc_study_problem(spec: PwcStudySpec):
    """Seeded random system, Fourier controls, parameters and goal of a pwc study."""
    dim = 2 ** spec.qubits
    drift = random_hermitian(dim, derive_seed(spec.seed, 0))
    controls = [(random_hermitian(dim, derive_seed(spec.seed, 1, k)), k) for k in range(spec.n_controls)]
    hamiltonian = ControlledHamiltonian(drift, controls)
    ansatz = FourierAnsatz(spec.duration, spec.n_controls, spec.n_terms)
    rng = np.random.default_rng(derive_seed(spec.seed, 2))
    shape = (spec.n_controls, spec.n_terms)
    alpha = FourierAnsatz.pack(
        rng.uniform(-1.0, 1.0, shape),
        rng.uniform(1.0, 3 * 2 * math.pi / spec.duration, shape),
        rng.uniform(0.0, 2 * math.pi, shape),
    )
    if spec.task == "gate":
        goal = GateGoal(random_unitary(dim, derive_seed(spec.seed, 3)))
    else:
        goal = StateGoal(random_state(dim, derive_seed(spec.seed, 3)), random_state(dim, derive_seed(spec.seed, 4)))
    return hamiltonian, ansatz, alpha, goal


def fit_slope(slices, errors, asymptotic_from: int = 1, floor: float = 1e-13) -> Optional[float]:
    """Least-squares slope of log10(error) against log10(slices) over the asymptotic points."""
    points = [(n, e) for n, e in zip(slices, errors) if n >= asymptotic_from and e > floor]
    if len(points) < 2:
        return None
    x, y = np.log10([p[0] for p in points]), np.log10([p[1] for p in points])
    return float(np.polyfit(x, y, 1)[0])


def run_pwc_study(spec: PwcStudySpec) -> StudyResult:
    """Relative goal error of piecewise-constant propagation against the reference."""
    hamiltonian, ansatz, alpha, goal = pwc_study_problem(spec)
    initial = goal.initial_block()
    started = time.perf_counter()
    reference = reference_run(hamiltonian, ansatz, alpha, spec.duration, spec.reference_tolerance,
                              spec.reference_method, initial=initial)
    reference_seconds = time.perf_counter() - started
    g_ref = goal.evaluate(reference.propagator).value
    logger.info("pwc study: reference g=%.6e in %.2fs (%d evaluations)", g_ref, reference_seconds, reference.evaluations)

    rows = []
    for sampling in spec.sampling_rules:
        for slices in spec.slice_counts:
            started = time.perf_counter()
            row = {"slices": slices, "sampling": sampling, "g_pwc": math.nan,
                   "relative_error": math.nan, "seconds": 0.0, "error": ""}
            try:
                final = pwc_propagate(hamiltonian, ansatz, alpha, spec.duration, slices, sampling, initial=initial)
                g_pwc = goal.evaluate(final).value
                row["g_pwc"] = g_pwc
                row["relative_error"] = abs(g_pwc - g_ref) / max(g_ref, RELATIVE_FLOOR)
            except GoatError as exc:
                logger.warning("pwc row %s/%d failed: %s", sampling, slices, exc)
                row["error"] = str(exc)
            row["seconds"] = time.perf_counter() - started
            rows.append(row)

    summary = {"g_reference": g_ref, "reference_seconds": reference_seconds,
               "reference_evaluations": reference.evaluations, "reference": reference.details}
    for sampling in spec.sampling_rules:
        family = [row for row in rows if row["sampling"] == sampling and not row["error"]]
        slices = [row["slices"] for row in family]
        errors = [row["relative_error"] for row in family]
        summary[f"slope_{sampling}"] = fit_slope(slices, errors, spec.asymptotic_from)
        reached = [n for n, e in zip(slices, errors) if e <= spec.error_target]
        summary[f"slices_to_target_{sampling}"] = reached[0] if reached else None

    return StudyResult(
        name="pwc",
        columns=["slices", "sampling", "g_pwc", "relative_error", "seconds", "error"],
        rows=rows,
        summary=summary,
    )


# --- control-dimension thresholds ---------------------------------------------

def _dim_ansatz(spec: DimStudySpec, control_dim: int, seed: int):
    if spec.parametrization == "fourier-amplitudes":
        full = FourierAnsatz(spec.duration, 1, control_dim)
        alpha = random_initial_parameters(full, np.zeros(full.n_parameters), seed)
        return full.with_trainable(full.kind_mask([AMPLITUDE])), alpha
    if spec.parametrization == "pwc":
        ansatz = PwcAnsatz(spec.duration, 1, control_dim)
        return ansatz, random_initial_parameters(ansatz, np.zeros(ansatz.n_parameters), seed)

    slices = (control_dim + 1) // 2
    ansatz = PwcAnsatz(spec.duration, 1, slices, flexible=True)
    mask = np.ones(ansatz.n_parameters, dtype=bool)
    if control_dim % 2:
        mask[-1] = False
    ansatz = ansatz.with_trainable(mask)
    alpha = random_initial_parameters(ansatz, np.ones(ansatz.n_parameters), seed)
    return ansatz, alpha


def dim_trial_problem(spec: DimStudySpec, dim: int, control_dim: int, trial: int) -> OptimizationProblem:
    """One random system, goal and start for a (dim, control_dim) cell."""
    root = derive_seed(spec.seed, dim, control_dim, trial)
    hamiltonian = ControlledHamiltonian(
        random_hermitian(dim, derive_seed(root, 0)),
        [(random_hermitian(dim, derive_seed(root, 1)), 0)],
    )
    if spec.task == "gate":
        goal = GateGoal(random_unitary(dim, derive_seed(root, 2)))
    else:
        goal = StateGoal(random_state(dim, derive_seed(root, 2)), random_state(dim, derive_seed(root, 3)))
    ansatz, alpha = _dim_ansatz(spec, control_dim, derive_seed(root, 4))
    return OptimizationProblem(
        hamiltonian=hamiltonian, ansatz=ansatz, goal=goal, duration=spec.duration,
        initial_parameters=alpha, threshold=spec.threshold,
        max_iterations=spec.max_iterations, seed=root,
    )


def _dim_trial(job) -> Tuple[bool, float, int]:
    spec, dim, control_dim, trial = job
    problem = dim_trial_problem(spec, dim, control_dim, trial)
    try:
        result = multistart(problem, spec.restarts, derive_seed(problem.seed, 5), stop_on_success=True)
    except GoatError as exc:
        logger.warning("trial d=%d n=%d #%d failed: %s", dim, control_dim, trial, exc)
        return False, 0.0, 0
    seconds = sum(summary["seconds"] for summary in result.summaries)
    return result.best.converged, seconds, result.starts


def run_dim_study(spec: DimStudySpec) -> StudyResult:
    """Success counts of GOAT per (Hilbert dim, control dim) cell."""
    cells = [(d, n) for d in spec.hilbert_dims for n in spec.control_dims]
    jobs = [(spec, d, n, trial) for d, n in cells for trial in range(spec.trials)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            outcomes = list(pool.map(_dim_trial, jobs))
    else:
        outcomes = [_dim_trial(job) for job in jobs]

    rows = []
    for index, (dim, control_dim) in enumerate(cells):
        cell = outcomes[index * spec.trials:(index + 1) * spec.trials]
        successes = sum(1 for ok, _, _ in cell if ok)
        rows.append({
            "hilbert_dim": dim,
            "control_dim": control_dim,
            "parametrization": spec.parametrization,
            "task": spec.task,
            "successes": successes,
            "trials": spec.trials,
            "success_fraction": successes / spec.trials,
            "median_seconds": float(np.median([seconds for _, seconds, _ in cell])),
            "mean_starts": float(np.mean([starts for _, _, starts in cell])),
        })
        logger.info("d=%d control dim=%d: %d/%d converged", dim, control_dim, successes, spec.trials)
    return StudyResult(
        name="dims",
        columns=["hilbert_dim", "control_dim", "parametrization", "task", "successes",
                 "trials", "success_fraction", "median_seconds", "mean_starts"],
        rows=rows,
    )


# --- benchmark problems ---------------------------------------------------------

def benchmark_problem(spec: BenchmarkProblemSpec) -> OptimizationProblem:
    """
    Resolve a named benchmark to a CNOT problem.

    ising-cnot: drift Z⊗Z with controls X⊗I, Y⊗I, I⊗X, I⊗Y; Fourier terms at
    the fixed harmonics 2*pi*j/T, amplitudes and phases trainable.
    nv-cnot-standin: drift Z⊗Z + 0.25 (Z⊗I - I⊗Z) with controls X⊗I and I⊗X;
    amplitudes, frequencies and phases all trainable.
    """
    T = spec.duration
    if spec.name == "ising-cnot":
        n_terms = spec.n_terms or 4
        drift = pauli_string("ZZ")
        labels = ["XI", "YI", "IX", "IY"]
        ansatz = FourierAnsatz(T, len(labels), n_terms, trainable=(AMPLITUDE, PHASE))
        harmonics = np.tile(2 * math.pi * np.arange(1, n_terms + 1) / T, (len(labels), 1))
        base = FourierAnsatz.pack(np.zeros_like(harmonics), harmonics, np.zeros_like(harmonics))
    else:
        n_terms = spec.n_terms or 5
        drift = pauli_string("ZZ") + 0.25 * (pauli_string("ZI") - pauli_string("IZ"))
        labels = ["XI", "IX"]
        ansatz = FourierAnsatz(T, len(labels), n_terms)
        base = np.zeros(ansatz.n_parameters)
    hamiltonian = ControlledHamiltonian(drift, [(pauli_string(label), k) for k, label in enumerate(labels)])
    alpha = random_initial_parameters(ansatz, base, derive_seed(spec.seed, 0))
    return OptimizationProblem(
        hamiltonian=hamiltonian, ansatz=ansatz, goal=GateGoal(CNOT), duration=T,
        initial_parameters=alpha, threshold=spec.threshold,
        max_iterations=spec.max_iterations, seed=spec.seed,
    )


def _threshold_ladder() -> List[float]:
    return [10.0 ** -k for k in range(2, 11, 2)]


def run_goat_vs_nm(spec: BenchmarkProblemSpec) -> StudyResult:
    """GOAT and Nelder-Mead from one shared start; times to each threshold."""
    problem = benchmark_problem(spec)
    goat = goat_optimize(problem)
    budget = spec.nm_time_factor * max(goat.seconds, 1e-3)
    nm = nelder_mead_optimize(replace(problem, max_seconds=budget, max_iterations=10 ** 7))

    rows = []
    for threshold in _threshold_ladder():
        goat_time, nm_time = goat.time_to_threshold(threshold), nm.time_to_threshold(threshold)
        rows.append({
            "threshold": threshold,
            "goat_seconds": goat_time,
            "nelder_mead_seconds": nm_time,
            "ratio": nm_time / goat_time if goat_time and nm_time else None,
        })
    summary = {
        "initial_g_goat": goat.records[0].value if goat.records else None,
        "initial_g_nelder_mead": nm.records[0].value if nm.records else None,
        "goat_status": goat.status, "goat_g": goat.value, "goat_seconds": goat.seconds,
        "nelder_mead_status": nm.status, "nelder_mead_g": nm.value, "nelder_mead_seconds": nm.seconds,
        "nelder_mead_budget_seconds": budget,
    }
    logger.info("goat-vs-nm: GOAT g=%.2e in %.2fs, Nelder-Mead g=%.2e in %.2fs",
                goat.value, goat.seconds, nm.value, nm.seconds)
    return StudyResult(
        name="goat-vs-nm",
        columns=["threshold", "goat_seconds", "nelder_mead_seconds", "ratio"],
        rows=rows,
        traces={"goat": goat, "nelder-mead": nm},
        summary=summary,
    )


def run_high_accuracy_cnot(spec: BenchmarkProblemSpec) -> StudyResult:
    """
    Drive the stand-in CNOT problem to ``spec.threshold`` with up to ``spec.starts`` starts.

    The best parameters are re-checked with the reference integrator and
    re-propagated once more; the final pulses are sampled on a uniform grid.
    """
    problem = replace(benchmark_problem(spec), settings=PropagatorSettings(reference_tolerance=spec.reference_tolerance))
    result = multistart(problem, spec.starts, spec.seed, stop_on_success=True)
    best, used = result.best, result.starts

    alpha = best.parameters
    check = reference_check(problem, alpha)
    g_reference = check["g_reference"]
    repeat = propagate(problem.hamiltonian, problem.ansatz, alpha, problem.duration, problem.settings)
    g_repeat = gate_infidelity(repeat.propagator, problem.goal)

    times = np.linspace(0.0, problem.duration, spec.pulse_samples)
    pulses = sample_controls(problem.ansatz, alpha, times)
    step = times[1] - times[0]
    second_differences = np.abs(np.diff(pulses, n=2, axis=1)) / step ** 2
    pulse_rows = [{"t": float(t), **{f"c{k}": float(pulses[k, i]) for k in range(pulses.shape[0])}}
                  for i, t in enumerate(times)]

    status = best.status
    if best.converged and g_reference > spec.threshold:
        status = "reference-mismatch"
    summary = {
        "status": status, "starts_used": used, "g": best.value,
        "g_reference": g_reference, "g_repeat": g_repeat, "reference": check["reference"],
        "max_second_difference": second_differences.max(axis=1).tolist(),
        "second_derivative_bound": problem.ansatz.second_derivative_bound(alpha).tolist(),
        "parameters": alpha.tolist(),
    }
    return StudyResult(
        name="cnot-hi",
        columns=["iteration", "g", "gradient_norm", "evaluations", "hamiltonian_evaluations", "seconds"],
        rows=best.to_rows(),
        traces={"goat": best},
        extras={"pulses": pulse_rows},
        summary=summary,
    )


