"""
Controls Module - Analytic control ansatze c_k(alpha, t)

Each ansatz exposes values, time derivatives of any order up to its cap,
parameter derivatives and mixed derivatives, evaluated on one analytic piece
at a time. The propagator consumes the vectorised tables
(``coefficients``/``gradient_coefficients``); the module-level functions are
the checked, scalar entry points.

Parameter vectors are plain float arrays laid out as ``ansatz.layout``.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from services.errors import BoundaryDerivativeError, InvalidMatrixError, TimeRangeError

DEFAULT_MAX_ORDER = 24

AMPLITUDE = "amplitude"
FREQUENCY = "frequency"
PHASE = "phase"
VALUE = "value"
WIDTH = "width"

FOURIER_KINDS = (AMPLITUDE, FREQUENCY, PHASE)

# Slack when checking t against [0, T]
TIME_SLACK = 1e-12


@dataclass(frozen=True)
class SlotDescriptor:
    """Ties one parameter index to its control, term and kind.

    ``control`` is -1 for slots shared by all controls (flexible slice widths).
    """
    control: int
    term: int
    kind: str
    piece: int = 0


def _shifted_sines(theta: np.ndarray, count: int) -> np.ndarray:
    """Table of sin(theta + n*pi/2) for n = 0..count-1, exact in the shift."""
    sin, cos = np.sin(theta), np.cos(theta)
    cycle = np.stack([sin, cos, -sin, -cos], axis=-1)
    return cycle[..., np.arange(count) % 4]


class ControlAnsatz(ABC):
    """A parameterised family of control functions on [0, duration]."""

    duration: float
    n_controls: int
    layout: Tuple[SlotDescriptor, ...]
    trainable: np.ndarray
    max_order: int = DEFAULT_MAX_ORDER
    flexible: bool = False

    @property
    def n_parameters(self) -> int:
        return len(self.layout)

    @property
    def trainable_indices(self) -> np.ndarray:
        return np.flatnonzero(self.trainable)

    @property
    def n_trainable(self) -> int:
        return int(np.count_nonzero(self.trainable))

    def check_parameters(self, alpha) -> np.ndarray:
        values = np.asarray(alpha, dtype=float)
        if values.shape != (self.n_parameters,):
            raise InvalidMatrixError(
                f"parameter vector has length {values.size}, ansatz expects {self.n_parameters}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidMatrixError("parameter vector has non-finite entries")
        return values

    def with_trainable(self, mask) -> "ControlAnsatz":
        """Copy of the ansatz with a different trainability mask."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_parameters,):
            raise InvalidMatrixError(f"trainable mask has length {mask.size}, expected {self.n_parameters}")
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.trainable = mask.copy()
        return clone

    def kind_mask(self, kinds: Iterable[str]) -> np.ndarray:
        kinds = set(kinds)
        return np.array([slot.kind in kinds for slot in self.layout], dtype=bool)

    @abstractmethod
    def pieces(self, alpha=None) -> List[Tuple[float, float]]:
        """Ordered sub-intervals of [0, duration] on which the controls are analytic."""

    @abstractmethod
    def coefficients(self, alpha: np.ndarray, t: float, order: int, piece: int) -> np.ndarray:
        """Table ``c[k, n] = d^n c_k / dt^n`` at ``t`` on ``piece``, shape (C, order+1)."""

    @abstractmethod
    def gradient_coefficients(self, alpha: np.ndarray, t: float, order: int, piece: int) -> np.ndarray:
        """Table ``d^n/dt^n dc_k/dalpha_s`` for trainable slots, shape (a, C, order+1)."""

    @abstractmethod
    def values(self, alpha: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Control values on a grid, shape (C, len(times)); right-continuous at boundaries."""

    def boundary_sensitivities(self, alpha: np.ndarray) -> Optional[np.ndarray]:
        """``d tau_i / d alpha_s`` for internal boundaries, shape (n_pieces-1, a), or None."""
        return None

    def locate(self, alpha: np.ndarray, t: float, order: int) -> int:
        """Index of the piece holding ``t``; raises on boundaries when ``order >= 1``."""
        if t < -TIME_SLACK or t > self.duration + TIME_SLACK:
            raise TimeRangeError(t, self.duration)
        t = min(max(t, 0.0), self.duration)
        pieces = self.pieces(alpha)
        last = len(pieces) - 1
        for index, (start, end) in enumerate(pieces):
            if start == end:
                continue
            if order >= 1 and ((t == start and index > 0) or (t == end and index < last)):
                raise BoundaryDerivativeError(t, order)
            if start <= t < end or (index == last and t >= start):
                return index
        return last


def _grid_pieces(boundaries: np.ndarray) -> List[Tuple[float, float]]:
    return [(float(boundaries[i]), float(boundaries[i + 1])) for i in range(len(boundaries) - 1)]


class FourierAnsatz(ControlAnsatz):
    """
    c_k(t) = sum_j A_kj sin(w_kj t + phi_kj).

    Parameter layout: control outer, term inner, slot kind innermost (A, w, phi).
    """

    def __init__(self, duration: float, n_controls: int, n_terms: int,
                 trainable: Sequence[str] = FOURIER_KINDS, mask=None,
                 max_order: int = DEFAULT_MAX_ORDER):
        if duration <= 0:
            raise InvalidMatrixError("duration must be positive")
        if n_controls < 1 or n_terms < 1:
            raise InvalidMatrixError("need at least one control and one term per control")
        self.duration = float(duration)
        self.n_controls = n_controls
        self.n_terms = n_terms
        self.max_order = max_order
        self.layout = tuple(
            SlotDescriptor(k, j, kind)
            for k in range(n_controls)
            for j in range(n_terms)
            for kind in FOURIER_KINDS
        )
        if mask is not None:
            self.trainable = np.asarray(mask, dtype=bool).ravel()
            if self.trainable.size != len(self.layout):
                raise InvalidMatrixError("trainable mask does not match the parameter layout")
        else:
            unknown = set(trainable) - set(FOURIER_KINDS)
            if unknown:
                raise InvalidMatrixError(f"unknown Fourier slot kinds: {sorted(unknown)}")
            self.trainable = self.kind_mask(trainable)

    @staticmethod
    def pack(amplitudes, frequencies, phases) -> np.ndarray:
        """Interleave (C, m) tables into the flat parameter vector."""
        return np.stack([np.asarray(amplitudes, dtype=float),
                         np.asarray(frequencies, dtype=float),
                         np.asarray(phases, dtype=float)], axis=-1).ravel()

    def unpack(self, alpha) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        table = np.asarray(alpha, dtype=float).reshape(self.n_controls, self.n_terms, 3)
        return table[..., 0], table[..., 1], table[..., 2]

    def pieces(self, alpha=None) -> List[Tuple[float, float]]:
        return [(0.0, self.duration)]

    def _tables(self, alpha, t, order):
        amplitude, frequency, phase = self.unpack(alpha)
        sines = _shifted_sines(frequency * t + phase, order + 2)
        powers = frequency[..., None] ** np.arange(order + 1)
        return amplitude, frequency, sines, powers

    def coefficients(self, alpha, t, order, piece=0) -> np.ndarray:
        amplitude, _, sines, powers = self._tables(alpha, t, order)
        return np.sum(amplitude[..., None] * powers * sines[..., : order + 1], axis=1)

    def gradient_coefficients(self, alpha, t, order, piece=0) -> np.ndarray:
        amplitude, frequency, sines, powers = self._tables(alpha, t, order)
        orders = np.arange(order + 1)
        # d/dw of w**n; the n = 0 column vanishes
        lower = orders * frequency[..., None] ** np.maximum(orders - 1, 0)
        per_slot = np.stack([
            powers * sines[..., : order + 1],
            amplitude[..., None] * (lower * sines[..., : order + 1] + t * powers * sines[..., 1:]),
            amplitude[..., None] * powers * sines[..., 1:],
        ], axis=2)  # (C, m, 3, order+1)

        C, m = self.n_controls, self.n_terms
        full = np.zeros((C, m, 3, C, order + 1))
        for k in range(C):
            full[k, :, :, k, :] = per_slot[k]
        return full.reshape(C * m * 3, C, order + 1)[self.trainable]

    def values(self, alpha, times) -> np.ndarray:
        amplitude, frequency, phase = self.unpack(alpha)
        times = np.asarray(times, dtype=float)
        theta = frequency[..., None] * times + phase[..., None]
        return np.sum(amplitude[..., None] * np.sin(theta), axis=1)

    def second_derivative_bound(self, alpha) -> np.ndarray:
        """Per-control bound on |c_k''(t)|: sum_j |A| w^2."""
        amplitude, frequency, _ = self.unpack(alpha)
        return np.sum(np.abs(amplitude) * frequency ** 2, axis=1)


class PwcAnsatz(ControlAnsatz):
    """
    Piecewise-constant controls on fixed or flexible-width slices.

    Fixed slices: one value per (control, slice), laid out control outer.
    Flexible slices: per slice, one value per control followed by a width
    parameter w_i; effective widths w_i**2 are renormalised to sum to T.
    """

    def __init__(self, duration: float, n_controls: int, n_slices: int,
                 boundaries=None, flexible: bool = False, mask=None,
                 max_order: int = DEFAULT_MAX_ORDER):
        if duration <= 0:
            raise InvalidMatrixError("duration must be positive")
        if n_controls < 1 or n_slices < 1:
            raise InvalidMatrixError("need at least one control and one slice")
        self.duration = float(duration)
        self.n_controls = n_controls
        self.n_slices = n_slices
        self.flexible = flexible
        self.max_order = max_order
        if flexible:
            if boundaries is not None:
                raise InvalidMatrixError("flexible slices take their boundaries from the parameters")
            self._boundaries = None
            layout = []
            for i in range(n_slices):
                layout.extend(SlotDescriptor(k, i, VALUE) for k in range(n_controls))
                layout.append(SlotDescriptor(-1, i, WIDTH))
            self.layout = tuple(layout)
        else:
            if boundaries is None:
                boundaries = np.linspace(0.0, self.duration, n_slices + 1)
            boundaries = np.asarray(boundaries, dtype=float)
            if (boundaries.shape != (n_slices + 1,) or boundaries[0] != 0.0
                    or not math.isclose(boundaries[-1], self.duration)
                    or np.any(np.diff(boundaries) <= 0)):
                raise InvalidMatrixError("slice boundaries must increase strictly from 0 to T")
            boundaries[-1] = self.duration
            self._boundaries = boundaries
            self.layout = tuple(
                SlotDescriptor(k, i, VALUE) for k in range(n_controls) for i in range(n_slices)
            )
        if mask is None:
            self.trainable = np.ones(len(self.layout), dtype=bool)
        else:
            self.trainable = np.asarray(mask, dtype=bool).ravel()
            if self.trainable.size != len(self.layout):
                raise InvalidMatrixError("trainable mask does not match the parameter layout")

    def slice_values(self, alpha) -> np.ndarray:
        """Values table, shape (C, n_slices)."""
        alpha = np.asarray(alpha, dtype=float)
        if self.flexible:
            per_slice = alpha.reshape(self.n_slices, self.n_controls + 1)
            return per_slice[:, : self.n_controls].T
        return alpha.reshape(self.n_controls, self.n_slices)

    def _effective_widths(self, alpha) -> Tuple[np.ndarray, np.ndarray]:
        raw = np.asarray(alpha, dtype=float).reshape(self.n_slices, self.n_controls + 1)[:, -1]
        return raw, raw ** 2

    def boundaries(self, alpha=None) -> np.ndarray:
        if not self.flexible:
            return self._boundaries
        if alpha is None:
            raise InvalidMatrixError("flexible-width slices need a parameter vector to place boundaries")
        _, widths = self._effective_widths(alpha)
        total = widths.sum()
        if total <= 0:
            raise InvalidMatrixError("flexible slice widths are all zero")
        edges = np.concatenate([[0.0], self.duration * np.cumsum(widths) / total])
        edges[-1] = self.duration
        return edges

    def pieces(self, alpha=None) -> List[Tuple[float, float]]:
        return _grid_pieces(self.boundaries(alpha))

    def coefficients(self, alpha, t, order, piece) -> np.ndarray:
        table = np.zeros((self.n_controls, order + 1))
        table[:, 0] = self.slice_values(alpha)[:, piece]
        return table

    def gradient_coefficients(self, alpha, t, order, piece) -> np.ndarray:
        full = np.zeros((self.n_parameters, self.n_controls, order + 1))
        for index, slot in enumerate(self.layout):
            if slot.kind == VALUE and slot.term == piece:
                full[index, slot.control, 0] = 1.0
        return full[self.trainable]

    def values(self, alpha, times) -> np.ndarray:
        edges = self.boundaries(alpha)
        times = np.asarray(times, dtype=float)
        slices = np.clip(np.searchsorted(edges, times, side="right") - 1, 0, self.n_slices - 1)
        return self.slice_values(alpha)[:, slices]

    def boundary_sensitivities(self, alpha) -> Optional[np.ndarray]:
        if not self.flexible:
            return None
        raw, widths = self._effective_widths(alpha)
        total = widths.sum()
        partial = np.cumsum(widths)[:-1]  # S_i for internal boundaries
        full = np.zeros((self.n_slices - 1, self.n_parameters))
        for index, slot in enumerate(self.layout):
            if slot.kind != WIDTH:
                continue
            j = slot.term
            before = (np.arange(self.n_slices - 1) >= j).astype(float)
            full[:, index] = 2.0 * raw[j] * self.duration * (before / total - partial / total ** 2)
        return full[:, self.trainable]


class PiecewiseAnalyticAnsatz(ControlAnsatz):
    """
    Ordered (sub-interval, ansatz) pairs partitioning [0, T].

    Each inner ansatz is evaluated at global time inside its own sub-interval
    and owns a contiguous block of the parameter vector.
    """

    def __init__(self, pieces: Sequence[Tuple[Tuple[float, float], ControlAnsatz]],
                 max_order: int = DEFAULT_MAX_ORDER):
        if not pieces:
            raise InvalidMatrixError("need at least one piece")
        intervals = [tuple(map(float, interval)) for interval, _ in pieces]
        if intervals[0][0] != 0.0:
            raise InvalidMatrixError("pieces must start at t=0")
        if any(end <= start for start, end in intervals):
            raise InvalidMatrixError("pieces must be non-empty")
        if any(nxt[0] != cur[1] for cur, nxt in zip(intervals, intervals[1:])):
            raise InvalidMatrixError("pieces must be contiguous and ordered")
        inner = [ansatz for _, ansatz in pieces]
        n_controls = {ansatz.n_controls for ansatz in inner}
        if len(n_controls) != 1:
            raise InvalidMatrixError("every piece must drive the same number of controls")
        for (start, end), ansatz in zip(intervals, inner):
            if ansatz.flexible:
                raise InvalidMatrixError("flexible-width ansatze cannot be nested")
            if ansatz.duration < end - 1e-12:
                raise InvalidMatrixError("inner ansatz duration must cover its sub-interval")

        self.duration = intervals[-1][1]
        self.n_controls = n_controls.pop()
        self.max_order = min([max_order] + [ansatz.max_order for ansatz in inner])
        self._intervals = intervals
        self._inner = inner
        self._offsets = np.cumsum([0] + [ansatz.n_parameters for ansatz in inner])
        self.layout = tuple(
            SlotDescriptor(slot.control, slot.term, slot.kind, p)
            for p, ansatz in enumerate(inner) for slot in ansatz.layout
        )
        self.trainable = np.concatenate([ansatz.trainable for ansatz in inner])

        # Global piece list: inner pieces clipped to each sub-interval
        self._piece_map = []
        self._pieces = []
        for p, ((start, end), ansatz) in enumerate(zip(intervals, inner)):
            for q, (a, b) in enumerate(ansatz.pieces()):
                lo, hi = max(a, start), min(b, end)
                if hi > lo:
                    self._pieces.append((lo, hi))
                    self._piece_map.append((p, q))

    def _split(self, alpha, p):
        return np.asarray(alpha, dtype=float)[self._offsets[p]:self._offsets[p + 1]]

    def pieces(self, alpha=None) -> List[Tuple[float, float]]:
        return list(self._pieces)

    def coefficients(self, alpha, t, order, piece) -> np.ndarray:
        p, q = self._piece_map[piece]
        return self._inner[p].coefficients(self._split(alpha, p), t, order, q)

    def gradient_coefficients(self, alpha, t, order, piece) -> np.ndarray:
        p, q = self._piece_map[piece]
        inner = self._inner[p]
        full = np.zeros((self.n_parameters, self.n_controls, order + 1))
        block = np.zeros((inner.n_parameters, self.n_controls, order + 1))
        block[inner.trainable_indices] = inner.gradient_coefficients(self._split(alpha, p), t, order, q)
        full[self._offsets[p]:self._offsets[p + 1]] = block
        return full[self.trainable]

    def values(self, alpha, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        starts = np.array([start for start, _ in self._intervals])
        owner = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(self._inner) - 1)
        result = np.zeros((self.n_controls, times.size))
        for p, ansatz in enumerate(self._inner):
            selected = owner == p
            if np.any(selected):
                result[:, selected] = ansatz.values(self._split(alpha, p), times[selected])
        return result

    def with_trainable(self, mask) -> "PiecewiseAnalyticAnsatz":
        clone = super().with_trainable(mask)
        clone._inner = [
            ansatz.with_trainable(clone.trainable[self._offsets[p]:self._offsets[p + 1]])
            for p, ansatz in enumerate(self._inner)
        ]
        return clone


def _slot_column(ansatz: ControlAnsatz, slot: int) -> Optional[int]:
    """Row of ``slot`` in the gradient tables, or None when frozen."""
    if not 0 <= slot < ansatz.n_parameters:
        raise IndexError(f"slot {slot} outside 0..{ansatz.n_parameters - 1}")
    if not ansatz.trainable[slot]:
        return None
    return int(np.count_nonzero(ansatz.trainable[:slot]))


def _check_control(ansatz: ControlAnsatz, k: int):
    if not 0 <= k < ansatz.n_controls:
        raise IndexError(f"control index {k} outside 0..{ansatz.n_controls - 1}")


def control_value(ansatz: ControlAnsatz, alpha, k: int, t: float) -> float:
    """c_k(alpha, t)."""
    return control_time_derivative(ansatz, alpha, k, t, 0)


def control_time_derivative(ansatz: ControlAnsatz, alpha, k: int, t: float, n: int) -> float:
    """
    Exact n-th time derivative of c_k at t.

    Raises:
        TimeRangeError: t outside [0, T]
        BoundaryDerivativeError: n >= 1 exactly on an internal piece boundary
    """
    alpha = ansatz.check_parameters(alpha)
    _check_control(ansatz, k)
    if n < 0 or n > ansatz.max_order:
        raise ValueError(f"derivative order must lie in 0..{ansatz.max_order}")
    piece = ansatz.locate(alpha, t, n)
    return float(ansatz.coefficients(alpha, t, n, piece)[k, n])


def control_param_derivative(ansatz: ControlAnsatz, alpha, k: int, t: float, slot: int, n: int = 0) -> float:
    """
    Exact d^n/dt^n dc_k/dalpha_slot at t.

    Zero for frozen slots and slots owned by another control. Flexible slice
    widths act only through the moving boundaries, so they are zero here too.
    """
    alpha = ansatz.check_parameters(alpha)
    _check_control(ansatz, k)
    if n < 0 or n > ansatz.max_order:
        raise ValueError(f"derivative order must lie in 0..{ansatz.max_order}")
    piece = ansatz.locate(alpha, t, n)
    row = _slot_column(ansatz, slot)
    if row is None:
        return 0.0
    return float(ansatz.gradient_coefficients(alpha, t, n, piece)[row, k, n])


def analytic_pieces(ansatz: ControlAnsatz, alpha=None) -> List[Tuple[float, float]]:
    """Partition of [0, T] on which the ansatz is analytic."""
    return ansatz.pieces(alpha)


def sample_controls(ansatz: ControlAnsatz, alpha, times) -> np.ndarray:
    """All control values on a time grid, shape (C, len(times))."""
    alpha = ansatz.check_parameters(alpha)
    times = np.asarray(times, dtype=float)
    outside = (times < -TIME_SLACK) | (times > ansatz.duration + TIME_SLACK)
    if np.any(outside):
        raise TimeRangeError(float(times[outside][0]), ansatz.duration)
    return ansatz.values(alpha, times)
