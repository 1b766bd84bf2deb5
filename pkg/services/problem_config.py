"""
Problem Config Module - JSON problem configs and study specs

A problem config declares the Hamiltonian, the control ansatz, the goal, the
duration and the propagator/optimizer settings. Complex numbers are written
as [re, im] pairs. Every validation failure raises ConfigError carrying the
dotted path of the offending field, e.g. ``hamiltonian.controls[1].operator``.
"""

import json
import math
import re
from dataclasses import dataclass, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config import DEFAULT_MAX_ITERATIONS, DEFAULT_THRESHOLD, SCHEMA_VERSION
from services.controls import (
    FOURIER_KINDS, VALUE, WIDTH, ControlAnsatz, FourierAnsatz, PwcAnsatz,
)
from services.densemath import CNOT, PAULI, derive_seed, pauli_string
from services.errors import ConfigError, GoatError
from services.objective import GateGoal, Goal, StateGoal
from services.optimize import OptimizationProblem, random_initial_parameters
from services.propagation import ControlledHamiltonian, PropagatorSettings
from services.studies import STUDY_NAMES, BenchmarkProblemSpec, DimStudySpec, PwcStudySpec

FAMILIES = ("fourier", "pwc", "pwc-flexible")
METHODS = ("goat", "nelder-mead", "goat-alternating")

NAMED_GATES = {
    "CNOT": CNOT,
    "CZ": np.diag([1, 1, 1, -1]).astype(complex),
    "SWAP": np.array([[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=complex),
    "H": np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2.0),
}

# term := [coefficient "*"] factor ("⊗" factor)*, or a compact Pauli string like "XI"
_TERM = re.compile(r"^\s*(?:(?P<coef>[0-9.eE+-]+)\s*\*)?\s*(?P<ops>[IXYZ](?:\s*⊗\s*[IXYZ])*|[IXYZ]+)\s*$")


@dataclass(eq=False)
class ProblemConfig:
    hamiltonian: ControlledHamiltonian
    ansatz: ControlAnsatz
    goal: Goal
    duration: float
    settings: PropagatorSettings
    base_parameters: np.ndarray
    randomize: bool = False
    method: str = "goat"
    threshold: float = DEFAULT_THRESHOLD
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    max_seconds: Optional[float] = None
    starts: int = 1
    bounds: Optional[np.ndarray] = None
    seed: int = 0
    output_dir: Optional[str] = None
    ansatz_source: Optional[Dict] = None


# --- primitive readers --------------------------------------------------------

def _require(data: Dict, key: str, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    if key not in data:
        raise ConfigError(_join(path, key), "is required")
    return data[key]


def _join(path: str, key) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else key


def _number(value, path: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(path, "expected a finite number")
    if positive and value <= 0:
        raise ConfigError(path, "must be positive")
    return float(value)


def _integer(value, path: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, "expected an integer")
    if value < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return value


def _complex(value, path: str) -> complex:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return complex(value)
    if not isinstance(value, list) or len(value) != 2:
        raise ConfigError(path, "complex numbers are written as [re, im]")
    return complex(_number(value[0], _join(path, 0)), _number(value[1], _join(path, 1)))


def _complex_array(value, path: str, ndim: int) -> np.ndarray:
    if ndim == 1:
        if not isinstance(value, list) or not value:
            raise ConfigError(path, "expected a non-empty list of [re, im] entries")
        return np.array([_complex(v, _join(path, i)) for i, v in enumerate(value)])
    if not isinstance(value, list) or not value or not all(isinstance(row, list) for row in value):
        raise ConfigError(path, "expected a matrix as a list of rows of [re, im] entries")
    rows = [_complex_array(row, _join(path, i), 1) for i, row in enumerate(value)]
    if any(len(row) != len(rows) for row in rows):
        raise ConfigError(path, f"matrix must be square, got {len(rows)} rows of lengths {[len(r) for r in rows]}")
    return np.array(rows)


def encode_complex(array: np.ndarray) -> List:
    """Nested [re, im] lists for a complex array."""
    array = np.asarray(array, dtype=complex)
    if array.ndim == 0:
        return [float(array.real), float(array.imag)]
    return [encode_complex(item) for item in array]


def parse_operator(value, path: str) -> np.ndarray:
    """Operator from a Pauli expression such as "Z⊗Z + 0.25*Z⊗I - 0.25*I⊗Z", or an explicit matrix."""
    if isinstance(value, list):
        return _complex_array(value, path, 2)
    if not isinstance(value, str) or not value.strip():
        raise ConfigError(path, "expected a Pauli expression or an explicit matrix")
    # split on +/- that separate terms, keeping exponent signs such as 1e-3 intact
    pieces = re.split(r"(?<![eE])\s*([+-])\s*(?=[0-9.IXYZ])", value.strip())
    if pieces[0] == "":
        pieces = pieces[1:]
    else:
        pieces = ["+"] + pieces
    total = None
    for sign, term in zip(pieces[0::2], pieces[1::2]):
        match = _TERM.match(term)
        if not match:
            raise ConfigError(path, f"cannot parse operator term {term!r}")
        labels = match.group("ops").replace("⊗", "").replace(" ", "")
        coefficient = float(match.group("coef")) if match.group("coef") else 1.0
        operator = (-1.0 if sign == "-" else 1.0) * coefficient * pauli_string(labels)
        if total is not None and total.shape != operator.shape:
            raise ConfigError(path, f"terms act on different numbers of qubits in {value!r}")
        total = operator if total is None else total + operator
    if total is None:
        raise ConfigError(path, f"empty operator expression {value!r}")
    return total


# --- sections -------------------------------------------------------------------

def _parse_hamiltonian(data, path: str = "hamiltonian") -> ControlledHamiltonian:
    drift = parse_operator(_require(data, "drift", path), _join(path, "drift"))
    controls_data = _require(data, "controls", path)
    if not isinstance(controls_data, list) or not controls_data:
        raise ConfigError(_join(path, "controls"), "expected a non-empty list")
    controls = []
    for i, entry in enumerate(controls_data):
        entry_path = _join(_join(path, "controls"), i)
        operator = parse_operator(_require(entry, "operator", entry_path), _join(entry_path, "operator"))
        if operator.shape != drift.shape:
            raise ConfigError(_join(entry_path, "operator"),
                              f"dimension {operator.shape[0]} does not match drift dimension {drift.shape[0]}")
        index = _integer(entry.get("control", i), _join(entry_path, "control"))
        controls.append((operator, index))
    try:
        return ControlledHamiltonian(drift, controls)
    except GoatError as exc:
        raise ConfigError(path, str(exc)) from None


def _table(data, key: str, path: str, shape: Tuple[int, int]) -> Optional[np.ndarray]:
    if key not in data:
        return None
    table = np.array(data[key], dtype=object)
    if table.shape != shape:
        raise ConfigError(_join(path, key), f"expected a table of shape {list(shape)}")
    return np.array([[_number(v, _join(_join(path, key), i)) for v in row] for i, row in enumerate(table)])


def _parse_ansatz(data, duration: float, path: str = "ansatz") -> Tuple[ControlAnsatz, np.ndarray, bool]:
    family = _require(data, "family", path)
    if family not in FAMILIES:
        raise ConfigError(_join(path, "family"), f"unknown family {family!r}; expected one of {list(FAMILIES)}")
    n_controls = _integer(_require(data, "controls", path), _join(path, "controls"), 1)
    initial = data.get("initial", {"random": True})
    if not isinstance(initial, dict):
        raise ConfigError(_join(path, "initial"), "expected an object")
    initial_path = _join(path, "initial")

    if family == "fourier":
        n_terms = _integer(_require(data, "terms", path), _join(path, "terms"), 1)
        kinds = data.get("trainable", list(FOURIER_KINDS))
        if not isinstance(kinds, list) or set(kinds) - set(FOURIER_KINDS):
            raise ConfigError(_join(path, "trainable"), f"expected a subset of {list(FOURIER_KINDS)}")
        ansatz = FourierAnsatz(duration, n_controls, n_terms, trainable=kinds)
        shape = (n_controls, n_terms)
        frequencies = initial.get("frequencies")
        if frequencies == "harmonics":
            frequencies = np.tile(2 * math.pi * np.arange(1, n_terms + 1) / duration, (n_controls, 1))
        else:
            frequencies = _table(initial, "frequencies", initial_path, shape)
        amplitudes = _table(initial, "amplitudes", initial_path, shape)
        phases = _table(initial, "phases", initial_path, shape)
        base = FourierAnsatz.pack(
            amplitudes if amplitudes is not None else np.zeros(shape),
            frequencies if frequencies is not None else np.ones(shape),
            phases if phases is not None else np.zeros(shape),
        )
    else:
        flexible = family == "pwc-flexible"
        n_slices = _integer(_require(data, "slices", path), _join(path, "slices"), 1)
        ansatz = PwcAnsatz(duration, n_controls, n_slices, flexible=flexible)
        kinds = data.get("trainable", [VALUE, WIDTH] if flexible else [VALUE])
        if not isinstance(kinds, list) or set(kinds) - {VALUE, WIDTH}:
            raise ConfigError(_join(path, "trainable"), "expected a subset of ['value', 'width']")
        ansatz = ansatz.with_trainable(ansatz.kind_mask(kinds))
        values = _table(initial, "values", initial_path, (n_controls, n_slices))
        base = np.zeros(ansatz.n_parameters)
        if flexible:
            base[ansatz.kind_mask([WIDTH])] = 1.0
        if values is not None:
            if flexible:
                base[ansatz.kind_mask([VALUE])] = values.T.ravel()
            else:
                base[:] = values.ravel()

    if "parameters" in initial:
        raw = initial["parameters"]
        if not isinstance(raw, list) or len(raw) != ansatz.n_parameters:
            raise ConfigError(_join(initial_path, "parameters"),
                              f"expected {ansatz.n_parameters} numbers for this ansatz")
        base = np.array([_number(v, _join(_join(initial_path, "parameters"), i)) for i, v in enumerate(raw)])
    randomize = bool(initial.get("random", False))
    return ansatz, base, randomize


def _parse_goal(data, dim: int, path: str = "goal") -> Goal:
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    try:
        if "gate" in data:
            name = data["gate"]
            if not isinstance(name, str):
                raise ConfigError(_join(path, "gate"), "expected a gate name")
            if name in NAMED_GATES:
                target = NAMED_GATES[name]
            elif set(name) <= set(PAULI):
                target = pauli_string(name)
            else:
                raise ConfigError(_join(path, "gate"),
                                  f"unknown gate {name!r}; expected one of {sorted(NAMED_GATES)} or a Pauli string")
            goal = GateGoal(target)
        elif "matrix" in data:
            goal = GateGoal(_complex_array(data["matrix"], _join(path, "matrix"), 2))
        elif "initial_state" in data or "target_state" in data:
            goal = StateGoal(
                _complex_array(_require(data, "initial_state", path), _join(path, "initial_state"), 1),
                _complex_array(_require(data, "target_state", path), _join(path, "target_state"), 1),
            )
        else:
            raise ConfigError(path, "expected one of 'gate', 'matrix' or an 'initial_state'/'target_state' pair")
    except GoatError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from None
    if goal.dim != dim:
        raise ConfigError(path, f"goal dimension {goal.dim} does not match Hamiltonian dimension {dim}")
    return goal


def _parse_settings(data, path: str = "propagator") -> PropagatorSettings:
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    known = {f.name for f in fields(PropagatorSettings)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(path, f"unknown keys {sorted(unknown)}")
    try:
        return PropagatorSettings(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def parse_problem_config(data: Dict) -> ProblemConfig:
    """Validate a decoded config document."""
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    version = _require(data, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r}; expected {SCHEMA_VERSION}")
    duration = _number(_require(data, "duration", ""), "duration", positive=True)
    hamiltonian = _parse_hamiltonian(_require(data, "hamiltonian", ""))
    ansatz_data = _require(data, "ansatz", "")
    ansatz, base, randomize = _parse_ansatz(ansatz_data, duration)
    if ansatz.n_controls != hamiltonian.n_controls:
        raise ConfigError("ansatz.controls",
                          f"ansatz has {ansatz.n_controls} controls, Hamiltonian uses {hamiltonian.n_controls}")
    goal = _parse_goal(_require(data, "goal", ""), hamiltonian.dim)
    settings = _parse_settings(data.get("propagator", {}))

    optimizer = data.get("optimizer", {})
    if not isinstance(optimizer, dict):
        raise ConfigError("optimizer", "expected an object")
    method = optimizer.get("method", "goat")
    if method not in METHODS:
        raise ConfigError("optimizer.method", f"unknown method {method!r}; expected one of {list(METHODS)}")
    threshold = _number(optimizer.get("threshold", DEFAULT_THRESHOLD), "optimizer.threshold", positive=True)
    if threshold >= 1:
        raise ConfigError("optimizer.threshold", "must lie in (0, 1)")
    max_seconds = optimizer.get("max_seconds")
    bounds = optimizer.get("bounds")
    if bounds is not None:
        try:
            bounds = np.array(bounds, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError("optimizer.bounds", "expected numeric [low, high] pairs") from None
        if bounds.shape != (ansatz.n_parameters, 2):
            raise ConfigError("optimizer.bounds", f"expected {ansatz.n_parameters} [low, high] pairs")
        if np.any(np.isnan(bounds)) or np.any(bounds[:, 0] > bounds[:, 1]):
            raise ConfigError("optimizer.bounds", "each pair needs low <= high")
    output_dir = data.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        raise ConfigError("output_dir", "expected a path string")

    return ProblemConfig(
        hamiltonian=hamiltonian,
        ansatz=ansatz,
        goal=goal,
        duration=duration,
        settings=settings,
        base_parameters=base,
        randomize=randomize,
        method=method,
        threshold=threshold,
        max_iterations=_integer(optimizer.get("max_iterations", DEFAULT_MAX_ITERATIONS), "optimizer.max_iterations"),
        max_seconds=None if max_seconds is None else _number(max_seconds, "optimizer.max_seconds", positive=True),
        starts=_integer(optimizer.get("starts", 1), "optimizer.starts", 1),
        bounds=bounds,
        seed=_integer(data.get("seed", 0), "seed"),
        output_dir=output_dir,
        ansatz_source={key: value for key, value in ansatz_data.items() if key != "initial"},
    )


def load_problem_config(path: str) -> Tuple[Optional[ProblemConfig], str]:
    """
    Read and validate a problem config file.

    Returns:
        tuple: (config or None, message)
    """
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        return None, f"cannot read config {path}: {exc.strerror or exc}"
    except json.JSONDecodeError as exc:
        return None, f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
    try:
        return parse_problem_config(data), "Config loaded."
    except ConfigError as exc:
        return None, f"{path}: {exc}"


def build_problem(config: ProblemConfig, seed: Optional[int] = None, threshold: Optional[float] = None,
                  max_iterations: Optional[int] = None) -> OptimizationProblem:
    """Resolve a config (plus command-line overrides) into an OptimizationProblem."""
    seed = config.seed if seed is None else seed
    alpha = config.base_parameters.copy()
    if config.randomize:
        alpha = random_initial_parameters(config.ansatz, alpha, derive_seed(seed, 0))
    return OptimizationProblem(
        hamiltonian=config.hamiltonian,
        ansatz=config.ansatz,
        goal=config.goal,
        duration=config.duration,
        initial_parameters=alpha,
        settings=config.settings,
        threshold=config.threshold if threshold is None else threshold,
        max_iterations=config.max_iterations if max_iterations is None else max_iterations,
        max_seconds=config.max_seconds,
        bounds=config.bounds,
        seed=seed,
    )


def problem_config_to_dict(config: ProblemConfig) -> Dict[str, Any]:
    """Serialize a config with operators as explicit matrices; parsing it again gives the same problem."""
    hamiltonian = config.hamiltonian
    goal = config.goal
    if isinstance(goal, GateGoal):
        goal_data = {"matrix": encode_complex(goal.target)}
    else:
        goal_data = {"initial_state": encode_complex(goal.initial_state),
                     "target_state": encode_complex(goal.target_state)}
    ansatz_data = dict(config.ansatz_source or {})
    ansatz_data["initial"] = {"parameters": config.base_parameters.tolist(), "random": config.randomize}
    settings = {f.name: getattr(config.settings, f.name) for f in fields(PropagatorSettings)}
    optimizer = {
        "method": config.method,
        "threshold": config.threshold,
        "max_iterations": config.max_iterations,
        "max_seconds": config.max_seconds,
        "starts": config.starts,
        "bounds": None if config.bounds is None else config.bounds.tolist(),
    }
    data = {
        "schema_version": SCHEMA_VERSION,
        "duration": config.duration,
        "hamiltonian": {
            "drift": encode_complex(hamiltonian.drift),
            "controls": [{"operator": encode_complex(operator), "control": int(index)}
                         for operator, index in zip(hamiltonian.operators, hamiltonian.control_indices)],
        },
        "ansatz": ansatz_data,
        "goal": goal_data,
        "propagator": settings,
        "optimizer": optimizer,
        "seed": config.seed,
    }
    if config.output_dir is not None:
        data["output_dir"] = config.output_dir
    return data


# --- study specs ---------------------------------------------------------------------

STUDY_SPECS = {
    "pwc": PwcStudySpec,
    "dims": DimStudySpec,
    "goat-vs-nm": BenchmarkProblemSpec,
    "cnot-hi": BenchmarkProblemSpec,
}

STUDY_DEFAULTS = {
    "cnot-hi": {"name": "nv-cnot-standin", "threshold": 1e-12},
}


def parse_study_spec(name: str, data: Optional[Dict] = None):
    if name not in STUDY_SPECS:
        raise ConfigError("study", f"unknown study {name!r}; expected one of {list(STUDY_NAMES)}")
    data = dict(data or {})
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r}; expected {SCHEMA_VERSION}")
    spec_type = STUDY_SPECS[name]
    known = {f.name for f in fields(spec_type)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], f"unknown key for study {name!r}")
    try:
        return spec_type(**{**STUDY_DEFAULTS.get(name, {}), **data})
    except (TypeError, ValueError) as exc:
        raise ConfigError("", str(exc)) from None


def load_study_spec(name: str, path: Optional[str] = None) -> Tuple[Optional[Any], str]:
    """
    Read a study spec; without a path the study's defaults are used.

    Returns:
        tuple: (spec or None, message)
    """
    data = None
    if path is not None:
        try:
            with open(path, encoding="utf-8") as handle:
                data = json.load(handle)
        except OSError as exc:
            return None, f"cannot read spec {path}: {exc.strerror or exc}"
        except json.JSONDecodeError as exc:
            return None, f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
    try:
        return parse_study_spec(name, data), "Spec loaded."
    except ConfigError as exc:
        return None, f"{path or name}: {exc}"
