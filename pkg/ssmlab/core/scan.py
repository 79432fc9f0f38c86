"""
The unified state-space recurrence, in recurrent and parallel (closed) form.

Arrays are laid out time-major: a, b, c are (T, D, N), delta is (T, D),
states are (T+1, D, N) and outputs are (T, D). Every channel d is an
independent scalar-input SSM with an N-dimensional diagonal state.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ssmlab.core.errors import ModeError, ParameterRangeError, ShapeMismatchError
from ssmlab.core.utils import (
    KIND_COEFFICIENTS, KIND_TRAJECTORY, MODE_COMPLEX, MODE_CONTINUOUS,
    Container, read_container, write_container
)

logger = logging.getLogger(__name__)

MODES = ('discrete', 'continuous')

# Tolerance for the a + delta = 1 / <= 1 preconditions.
CONDITION_TOL = 1e-12

# Rows of the (T, T) weight matrix evaluated at once in the parallel form.
PARALLEL_BLOCK = 512


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class StepCoefficients:
    """Per-timestep (A_t, b_t, c_t, delta_t) for D independent channels."""
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta: np.ndarray
    mode: str = 'discrete'

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"Unknown mode '{self.mode}', expected one of {MODES}")
        a = np.asarray(self.a)
        b = np.asarray(self.b)
        c = np.asarray(self.c)
        delta = np.asarray(self.delta, dtype=np.float64)

        if a.ndim != 3:
            raise ShapeMismatchError(f'a must be (T, D, N), got shape {a.shape}', dimension='a')
        T, D, N = a.shape
        if T < 1 or D < 1 or N < 1:
            raise ShapeMismatchError(f'Empty coefficient tensor: T={T}, D={D}, N={N}', dimension='a')
        for name, arr in (('b', b), ('c', c)):
            if arr.shape != a.shape:
                step = _first_bad_step(arr, a.shape)
                raise ShapeMismatchError(
                    f'{name} has shape {arr.shape}, expected {a.shape}', step=step, dimension=name
                )
        if delta.shape != (T, D):
            raise ShapeMismatchError(
                f'delta has shape {delta.shape}, expected {(T, D)}', dimension='delta'
            )

        for name, arr in (('a', a), ('b', b), ('c', c), ('delta', delta)):
            if not np.all(np.isfinite(arr)):
                raise ParameterRangeError(f'{name} contains non-finite entries')
        if np.any(delta <= 0):
            t, d = np.argwhere(delta <= 0)[0]
            raise ParameterRangeError(f'delta must be positive; delta[{t}, {d}] = {delta[t, d]}')

        dtype = np.complex128 if any(np.iscomplexobj(x) for x in (a, b, c)) else np.float64
        object.__setattr__(self, 'a', _frozen(a.astype(np.complex128 if np.iscomplexobj(a) else np.float64)))
        object.__setattr__(self, 'b', _frozen(b.astype(dtype if np.iscomplexobj(b) else np.float64)))
        object.__setattr__(self, 'c', _frozen(c.astype(dtype if np.iscomplexobj(c) else np.float64)))
        object.__setattr__(self, 'delta', _frozen(delta))

    @property
    def T(self) -> int:
        return self.a.shape[0]

    @property
    def D(self) -> int:
        return self.a.shape[1]

    @property
    def N(self) -> int:
        return self.a.shape[2]

    @property
    def is_complex(self) -> bool:
        return any(np.iscomplexobj(x) for x in (self.a, self.b, self.c))

    @classmethod
    def from_steps(cls, steps: Sequence[Tuple[Any, Any, Any, Any]],
                   mode: str = 'discrete') -> 'StepCoefficients':
        """
        Assemble coefficients from a list of per-step (a_t, b_t, c_t, delta_t).

        a_t, b_t, c_t are (N,) for a single channel or (D, N); delta_t is a
        scalar or (D,). A step whose sizes disagree with step 0 is rejected
        with its index.
        """
        if not steps:
            raise ShapeMismatchError('No steps given', step=0)
        rows_a, rows_b, rows_c, rows_d = [], [], [], []
        ref_shape = None
        for t, (a_t, b_t, c_t, d_t) in enumerate(steps):
            a_t, b_t, c_t = (np.atleast_2d(np.asarray(v)) for v in (a_t, b_t, c_t))
            d_t = np.atleast_1d(np.asarray(d_t, dtype=np.float64))
            if ref_shape is None:
                ref_shape = a_t.shape
            if a_t.shape != ref_shape or b_t.shape != ref_shape or c_t.shape != ref_shape:
                raise ShapeMismatchError(
                    f'Step {t}: a_t {a_t.shape}, b_t {b_t.shape}, c_t {c_t.shape} '
                    f'do not match {ref_shape}', step=t
                )
            if d_t.shape not in ((1,), (ref_shape[0],)):
                raise ShapeMismatchError(
                    f'Step {t}: delta_t has shape {d_t.shape}, expected scalar or ({ref_shape[0]},)',
                    step=t
                )
            rows_a.append(a_t)
            rows_b.append(b_t)
            rows_c.append(c_t)
            rows_d.append(np.broadcast_to(d_t, (ref_shape[0],)))
        return cls(a=np.stack(rows_a), b=np.stack(rows_b), c=np.stack(rows_c),
                   delta=np.stack(rows_d), mode=mode)

    def channel(self, d: int) -> 'StepCoefficients':
        """Single-channel view (D = 1) of channel d."""
        return StepCoefficients(a=self.a[:, d:d + 1], b=self.b[:, d:d + 1],
                                c=self.c[:, d:d + 1], delta=self.delta[:, d:d + 1],
                                mode=self.mode)

    def truncate(self, T: int) -> 'StepCoefficients':
        """Coefficients of the first T steps."""
        if not 1 <= T <= self.T:
            raise ShapeMismatchError(f'Cannot take {T} steps of a length-{self.T} sequence',
                                     dimension='T')
        return StepCoefficients(a=self.a[:T], b=self.b[:T], c=self.c[:T],
                                delta=self.delta[:T], mode=self.mode)

    def drive(self) -> np.ndarray:
        """The per-step drive term delta_t * b_t, shape (T, D, N)."""
        return self.delta[..., None] * self.b


def _first_bad_step(arr: np.ndarray, shape: Tuple[int, ...]) -> Optional[int]:
    if arr.ndim == len(shape) and arr.shape[0] != shape[0]:
        return min(arr.shape[0], shape[0])
    return 0 if arr.ndim != len(shape) else None


@dataclass(frozen=True)
class StateTrajectory:
    """Memory states h_0..h_T (h_0 = 0) and decoded outputs y_1..y_T."""
    states: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'states', _frozen(self.states))
        object.__setattr__(self, 'outputs', _frozen(self.outputs))

    @property
    def T(self) -> int:
        return self.outputs.shape[0]


def advance(a_t, h_prev, u_t):
    """One step of the recurrence: h_t = a_t * h_{t-1} + u_t."""
    return a_t * h_prev + u_t


def decode(c_t, h_t):
    """Linear decode y_t = c_t . h_t over the state axis."""
    return np.sum(c_t * h_t, axis=-1)


def _require_discrete(coeffs: StepCoefficients) -> None:
    if coeffs.mode != 'discrete':
        raise ModeError('Scans need discrete-mode coefficients; discretize continuous ones first')


def _resolve_length(coeffs: StepCoefficients, T: Optional[int]) -> StepCoefficients:
    if T is None or T == coeffs.T:
        return coeffs
    return coeffs.truncate(T)


def scan_recurrent(coeffs: StepCoefficients, T: Optional[int] = None) -> StateTrajectory:
    """
    Evaluate the recurrence step by step.

    Args:
        coeffs: discrete-mode coefficients
        T: number of steps to run (defaults to all of them)

    Returns:
        StateTrajectory with states[0] = 0
    """
    _require_discrete(coeffs)
    coeffs = _resolve_length(coeffs, T)
    u = coeffs.drive()
    dtype = np.result_type(coeffs.a, u)
    states = np.zeros((coeffs.T + 1, coeffs.D, coeffs.N), dtype=dtype)
    for t in range(coeffs.T):
        states[t + 1] = advance(coeffs.a[t], states[t], u[t])
    outputs = decode(coeffs.c, states[1:])
    return StateTrajectory(states=states, outputs=outputs)


def _log_path_ok(a_col: np.ndarray) -> bool:
    return not np.iscomplexobj(a_col) and bool(np.all(a_col > 0))


def _parallel_column_log(a_col: np.ndarray, u_col: np.ndarray) -> np.ndarray:
    # prod_{r=s+1}^{t} a_r = exp(L_t - L_s) with L the prefix sum of log a
    T = a_col.shape[0]
    L = np.cumsum(np.log(a_col))
    h = np.empty(T, dtype=np.result_type(a_col, u_col))
    cols = np.arange(T)
    for start in range(0, T, PARALLEL_BLOCK):
        rows = np.arange(start, min(start + PARALLEL_BLOCK, T))
        causal = cols[None, :] <= rows[:, None]
        exponent = np.where(causal, L[rows, None] - L[None, :], -np.inf)
        h[rows] = np.exp(exponent) @ u_col
    return h


def _parallel_column_direct(a_col: np.ndarray, u_col: np.ndarray) -> np.ndarray:
    T = a_col.shape[0]
    h = np.empty(T, dtype=np.result_type(a_col, u_col))
    for t in range(T):
        # weights for s = t, t-1, ..., 0
        weights = np.concatenate(([1.0], np.cumprod(a_col[t:0:-1])))
        h[t] = np.dot(weights, u_col[t::-1])
    return h


def scan_parallel(coeffs: StepCoefficients, T: Optional[int] = None) -> StateTrajectory:
    """
    Evaluate the closed form
    h_t = sum_{s<t} (prod_{r=s+1}^{t} a_r) * delta_s b_s + delta_t b_t.

    Positive real columns use prefix sums of logarithms; complex, zero or
    sign-changing columns use direct cumulative products.
    """
    _require_discrete(coeffs)
    coeffs = _resolve_length(coeffs, T)
    u = coeffs.drive()
    dtype = np.result_type(coeffs.a, u)
    states = np.zeros((coeffs.T + 1, coeffs.D, coeffs.N), dtype=dtype)
    fallbacks = 0
    for d in range(coeffs.D):
        for n in range(coeffs.N):
            a_col = coeffs.a[:, d, n]
            if _log_path_ok(a_col):
                states[1:, d, n] = _parallel_column_log(a_col, u[:, d, n])
            else:
                fallbacks += 1
                states[1:, d, n] = _parallel_column_direct(a_col, u[:, d, n])
    if fallbacks:
        logger.debug('scan_parallel: %d column(s) used direct products', fallbacks)
    outputs = decode(coeffs.c, states[1:])
    return StateTrajectory(states=states, outputs=outputs)


def cumulative_weights(coeffs: StepCoefficients, t: int) -> np.ndarray:
    """
    Weights prod_{r=s+1}^{t} a_r for s = 0..t (0-based steps; s = t gives 1).

    Returns:
        (t+1, D, N) array indexed by s
    """
    if not 0 <= t < coeffs.T:
        raise ShapeMismatchError(f'Step {t} outside [0, {coeffs.T})', step=t)
    a = coeffs.a
    reverse = np.cumprod(a[t:0:-1], axis=0)  # s = t-1, t-2, ..., 0
    ones = np.ones((1,) + a.shape[1:], dtype=a.dtype)
    return np.concatenate((reverse[::-1], ones), axis=0)


@dataclass
class DiagnosticsReport:
    """Diagnostics on a coefficient sequence; produced without raising."""
    mode: str
    a_max: np.ndarray
    a_min: np.ndarray
    mode_violations: int
    violation_indices: List[Tuple[int, int, int]]
    boundary_entries: int
    condition_i: np.ndarray
    condition_ii: np.ndarray
    messages: List[str] = field(default_factory=list)

    @property
    def strictly_interior(self) -> bool:
        return self.mode_violations == 0 and self.boundary_entries == 0

    @property
    def satisfies_condition_i(self) -> bool:
        return bool(np.all(self.condition_i))

    @property
    def satisfies_condition_ii(self) -> bool:
        return bool(np.all(self.condition_ii))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode,
            'a_max': self.a_max.tolist(),
            'a_min': self.a_min.tolist(),
            'mode_violations': self.mode_violations,
            'violation_indices': [list(ix) for ix in self.violation_indices],
            'boundary_entries': self.boundary_entries,
            'strictly_interior': self.strictly_interior,
            'condition_i': self.condition_i.tolist(),
            'condition_ii': self.condition_ii.tolist(),
            'messages': list(self.messages),
        }


def validate_coefficients(coeffs: StepCoefficients) -> DiagnosticsReport:
    """
    Report per-channel A_max / A_min, mode violations, and whether the
    over-smoothing preconditions hold:
    (i) a + delta = 1 everywhere, (ii) a + delta <= 1 everywhere.

    A_max / A_min are taken over moduli. The preconditions are only
    meaningful for real coefficients and are reported False otherwise.
    """
    a = coeffs.a
    modulus = np.abs(a)
    messages = []
    a_max = modulus.max(axis=(0, 2))
    a_min = modulus.min(axis=(0, 2))

    if coeffs.mode == 'discrete':
        bad = modulus > 1.0
        boundary = (modulus == 0.0) | (modulus == 1.0)
    else:
        bad = np.real(a) >= 0.0
        boundary = np.zeros_like(bad)
    violation_indices = [tuple(int(i) for i in ix) for ix in np.argwhere(bad)[:10]]
    if bad.any():
        messages.append(f'{int(bad.sum())} entries violate the {coeffs.mode}-mode constraint')
    if boundary.any():
        messages.append(f'{int(boundary.sum())} entries sit on the boundary (0 or 1)')

    D = coeffs.D
    if coeffs.mode == 'discrete' and not np.iscomplexobj(a):
        total = a + coeffs.delta[..., None]
        condition_i = np.all(np.abs(total - 1.0) <= CONDITION_TOL, axis=(0, 2))
        condition_ii = np.all(total <= 1.0 + CONDITION_TOL, axis=(0, 2))
    else:
        condition_i = np.zeros(D, dtype=bool)
        condition_ii = np.zeros(D, dtype=bool)
        messages.append('over-smoothing preconditions need real discrete coefficients')
    if not condition_ii.all():
        messages.append(f'{int((~condition_ii).sum())} channel(s) have a + delta > 1')

    return DiagnosticsReport(
        mode=coeffs.mode,
        a_max=a_max,
        a_min=a_min,
        mode_violations=int(bad.sum()),
        violation_indices=violation_indices,
        boundary_entries=int(boundary.sum()),
        condition_i=condition_i,
        condition_ii=condition_ii,
        messages=messages,
    )


def _mode_flag(coeffs: StepCoefficients) -> int:
    flag = MODE_CONTINUOUS if coeffs.mode == 'continuous' else 0
    return flag | (MODE_COMPLEX if coeffs.is_complex else 0)


def save_coefficients(path: Union[str, Path], coeffs: StepCoefficients,
                      trajectory: Optional[StateTrajectory] = None) -> str:
    """Write coefficients (and optionally their trajectory) to a container file."""
    arrays = {'a': coeffs.a, 'b': coeffs.b, 'c': coeffs.c, 'delta': coeffs.delta}
    kind = KIND_COEFFICIENTS
    if trajectory is not None:
        arrays['states'] = trajectory.states
        arrays['outputs'] = trajectory.outputs
        kind = KIND_TRAJECTORY
    container = Container(kind=kind, T=coeffs.T, N=coeffs.N, D=coeffs.D,
                          mode=_mode_flag(coeffs), meta={'mode': coeffs.mode},
                          arrays=arrays)
    return write_container(path, container)


def load_coefficients(path: Union[str, Path]) -> Tuple[StepCoefficients, Optional[StateTrajectory]]:
    """Read a file written by `save_coefficients`."""
    container = read_container(path)
    if container.kind not in (KIND_COEFFICIENTS, KIND_TRAJECTORY):
        raise ModeError(f'{path} does not hold coefficients (kind {container.kind})')
    arrays = container.arrays
    mode = 'continuous' if container.mode & MODE_CONTINUOUS else 'discrete'
    coeffs = StepCoefficients(a=arrays['a'], b=arrays['b'], c=arrays['c'],
                              delta=arrays['delta'], mode=mode)
    trajectory = None
    if container.kind == KIND_TRAJECTORY:
        trajectory = StateTrajectory(states=arrays['states'], outputs=arrays['outputs'])
    return coeffs, trajectory


def coefficients_to_frame(coeffs: StepCoefficients,
                          trajectory: Optional[StateTrajectory] = None) -> pd.DataFrame:
    """
    Flatten coefficients into one row per (d, t, n) for inspection.

    Columns: d, t, n, a_re, a_im, b, c, delta, h (t is 1-based, h = h_t).
    """
    T, D, N = coeffs.a.shape
    t_idx, d_idx, n_idx = np.meshgrid(np.arange(T), np.arange(D), np.arange(N), indexing='ij')
    frame = pd.DataFrame({
        'd': d_idx.ravel(),
        't': t_idx.ravel() + 1,
        'n': n_idx.ravel(),
        'a_re': np.real(coeffs.a).ravel(),
        'a_im': np.imag(coeffs.a).ravel(),
        'b': np.real(coeffs.b).ravel(),
        'c': np.real(coeffs.c).ravel(),
        'delta': np.broadcast_to(coeffs.delta[..., None], (T, D, N)).ravel(),
    })
    if np.iscomplexobj(coeffs.b):
        frame['b_im'] = np.imag(coeffs.b).ravel()
    if np.iscomplexobj(coeffs.c):
        frame['c_im'] = np.imag(coeffs.c).ravel()
    if trajectory is not None:
        frame['h'] = np.real(trajectory.states[1:]).ravel()
        if np.iscomplexobj(trajectory.states):
            frame['h_im'] = np.imag(trajectory.states[1:]).ravel()
    return frame.sort_values(['d', 't', 'n'], kind='stable').reset_index(drop=True)
