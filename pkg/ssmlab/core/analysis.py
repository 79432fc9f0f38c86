"""
Diagnostics: influence matrices and decay fits, smoothness, the
over-smoothing bound, frequency response, gate-gap histogram and the
positional perturbation probe.

Every analysis returns a report object with a to_dict() for the JSON
report and a frame() for the plot-ready CSV.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from ssmlab.core.errors import ParameterRangeError, ShapeMismatchError, UndefinedMetricError
from ssmlab.core.grad import backward, forward_with_tape
from ssmlab.core.model import TinyModel, probe_coefficients, probe_states, run_model
from ssmlab.core.params import S4Params
from ssmlab.core.scan import StepCoefficients, StateTrajectory, scan_recurrent, validate_coefficients

logger = logging.getLogger(__name__)

ENVELOPE_SLACK = 0.05
BOUND_SLACK = 1e-12
HISTOGRAM_EDGES = np.round(np.linspace(0.0, 1.0, 11), 10)


# -- influence and decay -------------------------------------------------------

@dataclass
class InfluenceMatrix:
    """Lower-triangular scores |dy_t/dx_s|, rows t, columns s."""
    scores: np.ndarray
    variant: str
    a_max: Optional[float]
    output_channel: int = 0
    aggregate: str = 'max'

    @property
    def T(self) -> int:
        return self.scores.shape[0]

    def frame(self) -> pd.DataFrame:
        t, s = np.tril_indices(self.T)
        return pd.DataFrame({'t': t, 's': s, 'lag': t - s, 'score': self.scores[t, s]})

    def to_dict(self) -> Dict[str, Any]:
        return {'variant': self.variant, 'a_max': self.a_max, 'T': self.T,
                'output_channel': self.output_channel, 'aggregate': self.aggregate}


def model_a_max(model, x) -> float:
    """Largest |a| over every layer's coefficients on input x."""
    probes: List[Dict[str, Any]] = []
    run_model(model, x, probes=probes)
    return float(max(np.max(np.abs(p['a'].value)) for p in probes))


def influence_matrix(model, x: np.ndarray, output_channel: int = 0,
                     aggregate: str = 'max') -> InfluenceMatrix:
    """
    One backward pass per output step t from y_t[output_channel]; entry
    (t, s) aggregates |dy_t/dx_s[d]| over input channels d by max (or
    Euclidean norm).
    """
    if isinstance(model, TinyModel):
        x = model.check_tokens(x)
        if x.ndim != 1:
            raise ShapeMismatchError(f'Influence needs a single token sequence, got {x.shape}', dimension='x')
    else:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeMismatchError(f'Influence needs a single (T, D) sequence, got {x.shape}', dimension='x')
    if aggregate not in ('max', 'norm'):
        raise ParameterRangeError(f"aggregate must be 'max' or 'norm', got {aggregate!r}")
    outputs, tape = forward_with_tape(model, x)
    T = outputs.shape[0]
    if not 0 <= output_channel < outputs.shape[1]:
        raise ShapeMismatchError(f'Output channel {output_channel} out of range', dimension='output_channel')
    scores = np.zeros((T, T))
    for t in range(T):
        cotangent = np.zeros_like(outputs)
        cotangent[t, output_channel] = 1.0
        g = np.abs(backward(tape, cotangent).inputs[: t + 1])
        scores[t, : t + 1] = g.max(axis=1) if aggregate == 'max' else np.sqrt(np.sum(g * g, axis=1))
    return InfluenceMatrix(scores=scores, variant=model.variant, a_max=model_a_max(model, x),
                           output_channel=output_channel, aggregate=aggregate)


@dataclass
class DecayFit:
    """Least-squares fit of log upper-envelope score against lag."""
    slope: float
    intercept: float
    r_squared: float
    kappa_hat: float
    kappa: Optional[float]
    lag_window: Tuple[int, int]
    excluded: int
    defined: bool = True
    message: str = ''
    lags: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_envelope: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({'lag': self.lags, 'log_env': self.log_envelope})

    def to_dict(self) -> Dict[str, Any]:
        return {'slope': self.slope, 'intercept': self.intercept, 'r_squared': self.r_squared,
                'kappa_hat': self.kappa_hat, 'kappa': self.kappa,
                'lag_window': list(self.lag_window), 'excluded': self.excluded,
                'defined': self.defined, 'message': self.message}


def upper_envelope(m: InfluenceMatrix) -> np.ndarray:
    """Per-lag maximum score over all valid (t, s) pairs."""
    return np.array([np.max(np.diagonal(m.scores, offset=-lag)) for lag in range(m.T)])


def theoretical_rate(a_max: Optional[float]) -> Optional[float]:
    """kappa = log(1 / A_max); 0 when A_max >= 1, undefined when A_max = 0."""
    if a_max is None or a_max <= 0:
        return None
    return float(max(np.log(1.0 / a_max), 0.0))


def fit_decay_rate(m: InfluenceMatrix, lag_window: Optional[Sequence[int]] = None) -> DecayFit:
    """
    Fit log(envelope) ~ intercept + slope * lag over lag_window = [first, last].

    Zero envelope values are excluded and counted; fewer than 4 usable lags
    leaves the fit undefined.
    """
    first, last = (0, m.T - 1) if lag_window is None else (int(lag_window[0]), int(lag_window[1]))
    last = min(last, m.T - 1)
    envelope = upper_envelope(m)
    lags = np.arange(first, last + 1)
    values = envelope[first:last + 1]
    positive = values > 0
    excluded = int((~positive).sum())
    kappa = theoretical_rate(m.a_max)
    if positive.sum() < 4:
        return DecayFit(slope=float('nan'), intercept=float('nan'), r_squared=float('nan'),
                        kappa_hat=float('nan'), kappa=kappa, lag_window=(first, last),
                        excluded=excluded, defined=False,
                        message=f'Only {int(positive.sum())} lags with positive scores; fit undefined')
    lags = lags[positive]
    log_env = np.log(values[positive])
    fit = stats.linregress(lags, log_env)
    residual = log_env - (fit.intercept + fit.slope * lags)
    ss_res = float(np.sum(residual ** 2))
    ss_tot = float(np.sum((log_env - log_env.mean()) ** 2))
    if ss_tot > 0:
        r_squared = float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))
    else:
        r_squared = 1.0
    return DecayFit(slope=float(fit.slope), intercept=float(fit.intercept), r_squared=r_squared,
                    kappa_hat=float(-fit.slope), kappa=kappa, lag_window=(first, last),
                    excluded=excluded, lags=lags, log_envelope=log_env,
                    message=f'{excluded} zero score(s) excluded' if excluded else '')


def check_envelope(fit: DecayFit, slack: float = ENVELOPE_SLACK) -> Dict[str, Any]:
    """The fitted slope must not exceed -kappa by more than `slack`."""
    if not fit.defined or fit.kappa is None:
        return {'passed': False, 'message': fit.message or 'theoretical rate undefined'}
    limit = -fit.kappa + slack
    passed = fit.slope <= limit
    return {
        'passed': bool(passed),
        'message': f'slope {fit.slope:.4f} vs limit {limit:.4f}',
        'slope': fit.slope,
        'limit': limit,
    }


# -- smoothness ------------------------------------------------------------------

def smoothness(tokens: np.ndarray) -> float:
    """
    Token sharpness: sum_{i != j} ||x_i - x_j||^2 / (2 (T - 1) sum_i ||x_i||^2).

    Tokens are rows; trailing axes are flattened into the token vector.
    """
    x = np.asarray(tokens)
    if x.ndim == 0:
        raise UndefinedMetricError('Smoothness needs a sequence of tokens')
    x = x.reshape(x.shape[0], -1)
    T = x.shape[0]
    if T < 2:
        raise UndefinedMetricError('Smoothness needs at least two tokens')
    energy = float(np.sum(np.abs(x) ** 2))
    if energy == 0.0:
        raise UndefinedMetricError('Smoothness is undefined for all-zero tokens')
    total = np.sum(x, axis=0)
    pairwise = 2.0 * T * energy - 2.0 * float(np.sum(np.abs(total) ** 2))
    return max(pairwise, 0.0) / (2.0 * (T - 1) * energy)


def _safe_smoothness(tokens: np.ndarray) -> float:
    try:
        return smoothness(tokens)
    except UndefinedMetricError:
        return float('nan')


@dataclass
class BoundReport:
    """Pairwise state gap against (1 - A_min^(T-1)) times the encoded-token gap, per channel."""
    lhs: np.ndarray
    rhs: np.ndarray
    a_min: np.ndarray
    condition_i: np.ndarray
    condition_ii: np.ndarray
    drive_centered: np.ndarray
    satisfied: Optional[bool]
    message: str = ''

    @property
    def claimed(self) -> np.ndarray:
        return self.condition_i | self.condition_ii

    def to_dict(self) -> Dict[str, Any]:
        return {'lhs': self.lhs.tolist(), 'rhs': self.rhs.tolist(), 'a_min': self.a_min.tolist(),
                'condition_i': self.condition_i.tolist(), 'condition_ii': self.condition_ii.tolist(),
                'drive_centered': self.drive_centered.tolist(), 'satisfied': self.satisfied,
                'message': self.message}


def _pairwise_gap(values: np.ndarray) -> np.ndarray:
    """max over (t, s) of ||v_t - v_s||_inf per channel; values (T, D, N)."""
    if np.iscomplexobj(values):
        diff = np.abs(values[:, None] - values[None, :])
        return diff.max(axis=(0, 1, 3))
    return (values.max(axis=0) - values.min(axis=0)).max(axis=-1)


def oversmoothing_check(coeffs: StepCoefficients,
                        trajectory: Optional[StateTrajectory] = None) -> BoundReport:
    """
    lhs = max_{t,s} ||h_t - h_s||_inf, rhs = (1 - A_min^(T-1)) max_{t,s} ||b_t - b_s||_inf
    per channel, with A_min the smallest diagonal entry.

    Condition (i): a + delta = 1 everywhere. Condition (ii): a + delta <= 1
    and min_t b_t[n] <= 0 <= max_t b_t[n] for every n. A verdict is given
    only on channels where a condition holds. With h_0 = 0 the bound can
    fail under (i) when the drive does not straddle zero; drive_centered
    reports that.
    """
    diagnostics = validate_coefficients(coeffs)
    if trajectory is None:
        trajectory = scan_recurrent(coeffs)
    states = trajectory.states[1:]
    b = coeffs.b
    T = coeffs.T
    if np.iscomplexobj(coeffs.a):
        a_min = np.abs(coeffs.a).min(axis=(0, 2))
    else:
        a_min = coeffs.a.min(axis=(0, 2))
    lhs = _pairwise_gap(states)
    factor = 1.0 - np.clip(a_min, 0.0, None) ** (T - 1) if T > 1 else np.zeros_like(a_min)
    rhs = factor * _pairwise_gap(b)

    if np.iscomplexobj(b):
        centered = np.zeros(coeffs.D, dtype=bool)
    else:
        centered = np.all((b.min(axis=0) <= 0) & (b.max(axis=0) >= 0), axis=-1)
    condition_i = diagnostics.condition_i.copy()
    condition_ii = diagnostics.condition_ii & centered
    claimed = condition_i | condition_ii
    if not claimed.any():
        return BoundReport(lhs=lhs, rhs=rhs, a_min=a_min, condition_i=condition_i,
                           condition_ii=condition_ii, drive_centered=centered, satisfied=None,
                           message='Neither condition holds; bound not claimed')
    ok = lhs[claimed] <= rhs[claimed] + BOUND_SLACK
    satisfied = bool(np.all(ok))
    message = f'{int(ok.sum())}/{int(claimed.sum())} claimed channel(s) within the bound'
    if np.any(condition_i & ~centered):
        message += '; condition (i) holds with an uncentered drive on some channel'
    return BoundReport(lhs=lhs, rhs=rhs, a_min=a_min, condition_i=condition_i, condition_ii=condition_ii,
                       drive_centered=centered, satisfied=satisfied, message=message)


@dataclass
class LayerwiseReport:
    rows: List[Dict[str, Any]]
    bounds: List[BoundReport]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=['layer', 'probe', 'epsilon'])

    def block_epsilons(self) -> np.ndarray:
        return np.array([r['epsilon'] for r in self.rows if r['probe'] == 'block'])

    def to_dict(self) -> Dict[str, Any]:
        return {'layers': len(self.bounds), 'bounds': [b.to_dict() for b in self.bounds]}


def layerwise_smoothness(model, x) -> LayerwiseReport:
    """
    Smoothness of encoded tokens b_t, states h_t, mixer outputs and block
    outputs at every layer, plus each layer's over-smoothing bound report.
    """
    probes: List[Dict[str, Any]] = []
    run_model(model, x, probes=probes)
    rows, bounds = [], []
    for layer, probe in enumerate(probes):
        coeffs = probe_coefficients(probe)
        states = probe_states(probe)
        mixer = probe['mixer'].value
        block = probe['block'].value
        if mixer.ndim == 3:
            mixer, block = mixer[0], block[0]
        for name, values in (('b', coeffs.b), ('h', states), ('mixer', mixer), ('block', block)):
            rows.append({'layer': layer, 'probe': name, 'epsilon': _safe_smoothness(values)})
        full = np.concatenate([np.zeros((1,) + states.shape[1:], dtype=states.dtype), states])
        outputs = np.sum(coeffs.c * states, axis=-1)
        bounds.append(oversmoothing_check(coeffs, StateTrajectory(states=full, outputs=outputs)))
    return LayerwiseReport(rows=rows, bounds=bounds)


def bound_frame(reports: Sequence[BoundReport]) -> pd.DataFrame:
    """CSV layout: instance, lhs, rhs, satisfied (worst channel per instance)."""
    rows = []
    for i, report in enumerate(reports):
        margin = report.lhs - report.rhs
        d = int(np.argmax(margin))
        rows.append({'instance': i, 'lhs': float(report.lhs[d]), 'rhs': float(report.rhs[d]),
                     'satisfied': report.satisfied})
    return pd.DataFrame(rows, columns=['instance', 'lhs', 'rhs', 'satisfied'])


# -- frequency response --------------------------------------------------------------

def default_omega_grid(points: int = 256, low: float = 1e-2, high: float = 1e4) -> np.ndarray:
    return np.logspace(np.log10(low), np.log10(high), points)


@dataclass
class FrequencyResponse:
    """|Z(omega)| of the continuous-time kernel, one row per channel."""
    omega: np.ndarray
    magnitude: np.ndarray
    cutoffs: Dict[float, np.ndarray]
    bound: np.ndarray
    a_max: np.ndarray
    verified: Dict[float, bool]
    at_cutoff: Dict[float, np.ndarray]
    bound_holds: bool
    monotone_tail: Optional[bool] = None

    def frame(self, channel: int = 0) -> pd.DataFrame:
        return pd.DataFrame({'omega': self.omega, 'magnitude': self.magnitude[channel]})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'cutoffs': {str(eps): v.tolist() for eps, v in self.cutoffs.items()},
            'verified': {str(eps): v for eps, v in self.verified.items()},
            'magnitude_at_cutoff': {str(eps): v.tolist() for eps, v in self.at_cutoff.items()},
            'a_max': self.a_max.tolist(),
            'bound_holds': self.bound_holds,
            'monotone_tail': self.monotone_tail,
            'passed': bool(all(self.verified.values()) and self.bound_holds),
        }


def transfer_function(a_diag: np.ndarray, b: np.ndarray, c: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Z(omega) = sum_n c_n b_n / (i omega - A_n) for each channel row."""
    terms = (c * b)[:, None, :] / (1j * omega[None, :, None] - a_diag[:, None, :])
    return terms.sum(axis=-1)


def frequency_response(s4: S4Params, omega: Optional[np.ndarray] = None,
                       epsilons: Sequence[float] = (0.1, 0.01)) -> FrequencyResponse:
    """
    Analytic response of the continuous-time S4 kernel, the cutoff
    Omega(eps) = ||b|| ||c|| / eps + A_max, and the pointwise bound
    ||b|| ||c|| / (omega - A_max) for omega > A_max. A_max is max_n |A_n|.
    """
    a = s4.a_diag
    if np.any(np.real(a) >= 0):
        raise ParameterRangeError('Frequency response needs every A entry with negative real part')
    omega = default_omega_grid() if omega is None else np.asarray(omega, dtype=np.float64)
    if np.any(omega <= 0):
        raise ParameterRangeError('omega grid must be positive')
    magnitude = np.abs(transfer_function(a, s4.b, s4.c, omega))
    norm_bc = np.linalg.norm(s4.b, axis=-1) * np.linalg.norm(s4.c, axis=-1)
    a_max = np.abs(a).max(axis=-1)

    gap = omega[None, :] - a_max[:, None]
    with np.errstate(divide='ignore'):
        bound = np.where(gap > 0, norm_bc[:, None] / np.where(gap > 0, gap, 1.0), np.inf)
    bound_holds = bool(np.all(magnitude <= bound * (1 + 1e-12)))

    cutoffs, verified, at_cutoff = {}, {}, {}
    for eps in epsilons:
        cutoff = norm_bc / eps + a_max
        cutoffs[eps] = cutoff
        beyond = omega[None, :] >= cutoff[:, None]
        verified[eps] = bool(np.all(magnitude[beyond] <= eps))
        at_cutoff[eps] = np.array([np.abs(transfer_function(a[d:d + 1], s4.b[d:d + 1], s4.c[d:d + 1],
                                                            np.array([cutoff[d]])))[0, 0]
                                   for d in range(a.shape[0])])
        verified[eps] = verified[eps] and bool(np.all(at_cutoff[eps] <= eps))

    monotone = None
    if a.shape[-1] == 1:
        tail = omega >= a_max.max()
        monotone = bool(np.all(np.diff(magnitude[:, tail], axis=-1) <= 1e-15))
    return FrequencyResponse(omega=omega, magnitude=magnitude, cutoffs=cutoffs, bound=bound,
                             a_max=a_max, verified=verified, at_cutoff=at_cutoff,
                             bound_holds=bound_holds, monotone_tail=monotone)


# -- gate gap ----------------------------------------------------------------------

@dataclass
class GateGapReport:
    """Per (layer, d, n) gap A_max - A_min over all timesteps and inputs."""
    gaps: pd.DataFrame
    edges: np.ndarray
    cumulative: np.ndarray
    fraction_below_half: float

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({'bin_edge': self.edges, 'cumulative': self.cumulative})

    def to_dict(self) -> Dict[str, Any]:
        return {'channels': len(self.gaps), 'fraction_below_half': self.fraction_below_half,
                'cumulative': dict(zip([f'{e:.1f}' for e in self.edges], self.cumulative.tolist()))}


def gate_gap_histogram(model, inputs: Sequence[np.ndarray]) -> GateGapReport:
    """
    Cumulative histogram of per-channel gate gaps at edges 0, 0.1, ..., 1.0
    (proportion of channels with gap <= edge).
    """
    if len(inputs) == 0:
        raise ShapeMismatchError('gate_gap_histogram needs at least one input', dimension='inputs')
    hi: Optional[List[np.ndarray]] = None
    lo: Optional[List[np.ndarray]] = None
    for x in inputs:
        probes: List[Dict[str, Any]] = []
        run_model(model, x, probes=probes)
        mod = [np.abs(p['a'].value).reshape((-1,) + p['a'].shape[-2:]) for p in probes]
        layer_hi = [m.max(axis=0) for m in mod]
        layer_lo = [m.min(axis=0) for m in mod]
        if hi is None:
            hi, lo = layer_hi, layer_lo
        else:
            hi = [np.maximum(h, n) for h, n in zip(hi, layer_hi)]
            lo = [np.minimum(l, n) for l, n in zip(lo, layer_lo)]
    rows = []
    for layer, (h, l) in enumerate(zip(hi, lo)):
        for d in range(h.shape[0]):
            for n in range(h.shape[1]):
                rows.append({'layer': layer, 'd': d, 'n': n, 'a_max': float(h[d, n]),
                             'a_min': float(l[d, n]), 'gap': float(h[d, n] - l[d, n])})
    gaps = pd.DataFrame(rows)
    values = gaps['gap'].to_numpy()
    cumulative = np.array([np.mean(values <= edge) for edge in HISTOGRAM_EDGES])
    return GateGapReport(gaps=gaps, edges=HISTOGRAM_EDGES.copy(), cumulative=cumulative,
                         fraction_below_half=float(np.mean(values < 0.5)))


# -- positional perturbation -----------------------------------------------------

def probe_positions(inputs: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Final query position of each example and the pad slots preceding it.
    """
    finals = np.array([np.flatnonzero(m)[-1] for m in mask])
    slots = [np.flatnonzero(row[:q] == 0) for row, q in zip(inputs, finals)]
    return finals, slots


def perturbation_probe(model: TinyModel, split, region: str, k: int, seed: int = 0,
                       batch_size: int = 64) -> Dict[str, Any]:
    """
    Corrupt k pad slots before each example's final query with uniform random
    tokens from [1, V) and compare accuracy on that query.

    `leading` takes the earliest k slots (just after the key-value section),
    `trailing` the k slots closest to the query.
    """
    from ssmlab.core.training import predict

    if region not in ('leading', 'trailing'):
        raise ParameterRangeError(f"region must be 'leading' or 'trailing', got {region!r}")
    inputs = np.asarray(split.inputs)
    targets = np.asarray(split.targets)
    finals, slots = probe_positions(inputs, np.asarray(split.mask))
    lengths = np.array([len(s) for s in slots])
    limiting = int(np.argmin(lengths))
    usable = int(lengths[limiting])
    if k < 0 or (k > 0 and k >= usable):
        name = getattr(split, 'name', '') or 'split'
        raise ParameterRangeError(
            f'k={k} must be below the usable region length {usable}, set by {name} example {limiting} '
            f'(final query at position {int(finals[limiting])})'
        )

    rows = np.arange(len(inputs))
    clean = predict(model, inputs, batch_size=batch_size)[rows, finals]
    rng = np.random.default_rng(seed)
    corrupted_inputs = inputs.copy()
    if k > 0:
        for i, s in enumerate(slots):
            chosen = s[:k] if region == 'leading' else s[-k:]
            corrupted_inputs[i, chosen] = rng.integers(1, model.vocab_size, size=k)
        corrupted = predict(model, corrupted_inputs, batch_size=batch_size)[rows, finals]
    else:
        corrupted = clean
    answer = targets[rows, finals]
    clean_acc = float(np.mean(clean == answer))
    corrupted_acc = float(np.mean(corrupted == answer))
    return {
        'region': region,
        'k': k,
        'usable': usable,
        'limiting_example': limiting,
        'clean_accuracy': clean_acc,
        'corrupted_accuracy': corrupted_acc,
        'drop': clean_acc - corrupted_acc,
        'seed': seed,
    }
