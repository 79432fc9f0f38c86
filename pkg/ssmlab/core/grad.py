"""
Gradients of models through the tape, and the finite-difference oracle.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ssmlab.core import autodiff as ad
from ssmlab.core.model import SSMLayer, TinyModel, attach, run_model
from ssmlab.core.params import MambaParams, PolarizationConfig, polarized_columns

logger = logging.getLogger(__name__)

FD_STEP = 1e-4
GRAD_TOL = 1e-5
REL_FLOOR = 1e-8


@dataclass
class GradientSet:
    """Gradients w.r.t. the input, every parameter tensor, and watched intermediates."""
    inputs: Optional[np.ndarray]
    params: Dict[str, np.ndarray]
    intermediates: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    def all_finite(self) -> bool:
        arrays = list(self.params.values())
        if self.inputs is not None:
            arrays.append(self.inputs)
        return all(np.all(np.isfinite(a)) for a in arrays)


def _input_leaf(tape: ad.Tape, model, x):
    if isinstance(model, TinyModel):
        return x
    return tape.leaf(np.asarray(x, dtype=np.float64), 'x')


def forward_with_tape(model, x) -> Tuple[np.ndarray, ad.Tape]:
    """
    Forward pass recorded on a fresh tape.

    The tape keeps a reference to the model (tape.model) and the output Var
    (tape.output) for `backward`.
    """
    tape = ad.Tape(record=True)
    p = attach(tape, model)
    out = model.forward_vars(tape, _input_leaf(tape, model, x), p)
    tape.model = model
    tape.output = out
    return out.value, tape


def backward(tape: ad.Tape, cotangent: Any) -> GradientSet:
    """
    Reverse-mode gradients of <cotangent, outputs>.

    Frozen (polarized) entries report exactly zero parameter gradient.
    """
    grads = tape.backward(tape.output, cotangent)
    named, watched = ad.gradients_by_name(tape, grads)
    frozen = tape.model.frozen()
    params = {}
    for name in tape.model.tensors():
        g = np.array(named[name], copy=True)
        mask = frozen.get(name)
        if mask is not None and mask.any():
            g[mask] = 0.0
        params[name] = g
    if 'x' in named:
        inputs = named['x']
    else:
        inputs = watched['inputs'][0] if 'inputs' in watched else None
    intermediates = {k: v for k, v in watched.items() if k != 'inputs'}
    return GradientSet(inputs=inputs, params=params, intermediates=intermediates)


def finite_difference(model, x: np.ndarray, component: Tuple[int, ...], h: float = FD_STEP) -> np.ndarray:
    """
    Central differences (f(x + h e) - f(x - h e)) / 2h of every output with
    respect to one input component, e.g. (t, d).
    """
    if h <= 0:
        raise ValueError('Finite-difference step must be positive')
    x = np.asarray(x, dtype=np.float64)
    plus, minus = x.copy(), x.copy()
    plus[component] += h
    minus[component] -= h
    return (run_model(model, plus) - run_model(model, minus)) / (2.0 * h)


def finite_difference_param(model, inputs, name: str, index: Tuple[int, ...],
                            h: float = FD_STEP) -> np.ndarray:
    """Central differences of every output with respect to one parameter entry."""
    if h <= 0:
        raise ValueError('Finite-difference step must be positive')
    value = model.tensors()[name]
    plus, minus = value.copy(), value.copy()
    plus[index] += h
    minus[index] -= h
    up = run_model(model.with_tensors({name: plus}), inputs)
    down = run_model(model.with_tensors({name: minus}), inputs)
    return (up - down) / (2.0 * h)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|, 1e-8) over one tensor."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _sample_indices(shape: Tuple[int, ...], allowed: np.ndarray, limit: int,
                    rng: np.random.Generator) -> List[Tuple[int, ...]]:
    candidates = np.argwhere(allowed.reshape(shape)) if shape else np.zeros((1, 0), dtype=int)
    if limit and len(candidates) > limit:
        pick = np.sort(rng.choice(len(candidates), size=limit, replace=False))
        candidates = candidates[pick]
    return [tuple(int(i) for i in row) for row in candidates]


def gradient_check(model, x, cotangent: np.ndarray, h: float = FD_STEP, max_entries: int = 32,
                   seed: int = 0, tol: float = GRAD_TOL) -> List[Dict[str, Any]]:
    """
    Compare analytic gradients of <cotangent, outputs> with central
    differences, per tensor (input first, then every parameter).

    Tensors larger than `max_entries` are checked on a seeded sample of
    entries; frozen entries are skipped.
    """
    rng = np.random.default_rng(seed)
    outputs, tape = forward_with_tape(model, x)
    grads = backward(tape, cotangent)
    rows = []

    if not isinstance(model, TinyModel):
        x = np.asarray(x, dtype=np.float64)
        idx = _sample_indices(x.shape, np.ones(x.shape, dtype=bool), max_entries, rng)
        numeric = np.array([np.sum(cotangent * finite_difference(model, x, i, h)) for i in idx])
        analytic = np.array([grads.inputs[i] for i in idx])
        err = relative_error(analytic, numeric)
        rows.append({'tensor': 'x', 'max_rel_err': err, 'pass': err < tol})

    frozen = model.frozen()
    for name, value in model.tensors().items():
        value = np.asarray(value)
        if np.iscomplexobj(value):
            continue
        allowed = ~frozen.get(name, np.zeros(value.shape, dtype=bool))
        idx = _sample_indices(value.shape, allowed, max_entries, rng)
        if not idx:
            continue
        numeric = np.array([np.sum(cotangent * finite_difference_param(model, x, name, i, h))
                            for i in idx])
        analytic = np.array([grads.params[name][i] for i in idx])
        err = relative_error(analytic, numeric)
        rows.append({'tensor': name, 'max_rel_err': err, 'pass': err < tol})
    return rows


def gradient_report_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    """CSV layout: variant, seed, tensor, max_rel_err, pass."""
    return pd.DataFrame(rows, columns=['variant', 'seed', 'tensor', 'max_rel_err', 'pass'])


def free_subblock(params: MambaParams) -> MambaParams:
    """The unpolarized Mamba mixer made of the free state columns only."""
    free = ~polarized_columns(params.N, params.polarization)
    return MambaParams(a_diag=params.a_diag[:, free], w_delta=params.w_delta, b_delta=params.b_delta,
                       w_b=params.w_b[free], w_c=params.w_c[free])


def check_polarized_delta_gradient(model: SSMLayer, x: np.ndarray,
                                   cotangent: Optional[np.ndarray] = None) -> Dict[str, Any]:
    """
    Verify that on a polarized mixer dl/ddelta_t equals G_t (the path through
    the drive delta_t b_t) plus the free-channel terms
    (dl/da_{t,n}) (da_{t,n}/ddelta_t), the one-channel term being exactly
    zero and the zero-channel term negligible.

    The zero-channel term is exp(zero_value * delta) * |zero_value| * |dl/da|;
    it falls below 1e-300 only once delta >= 0.75 at zero_value = -1000.
    """
    params = model.params
    pol: PolarizationConfig = params.polarization
    if not (pol.one_channel and pol.zero_channel):
        return {'passed': False, 'message': 'Both polarization channels must be enabled'}
    x = np.asarray(x, dtype=np.float64)
    outputs, tape = forward_with_tape(model, x)
    if cotangent is None:
        cotangent = np.ones_like(outputs)
    grads = backward(tape, cotangent)
    d_delta = grads.intermediates['delta'][0]
    d_a = grads.intermediates['a'][0]
    d_u = grads.intermediates['u'][0]

    coeffs_a = tape.watched['a'][0].value
    b = tape.watched['b'][0].value
    delta = tape.watched['delta'][0].value
    A = params.a_diag

    drive_term = np.sum(d_u * b, axis=-1)
    channel_terms = (d_a * coeffs_a) * A
    free = ~polarized_columns(params.N, pol)
    expected = drive_term + np.sum(channel_terms[..., free], axis=-1)

    one_term = channel_terms[..., 0]
    zero_term = channel_terms[..., -1]
    difference = float(np.max(np.abs(d_delta - expected)))
    zero_magnitude = float(np.max(np.abs(zero_term)))
    delta_min = float(delta.min())
    zero_bound = float(np.exp(pol.zero_value * delta_min) * abs(pol.zero_value) * np.max(np.abs(d_a[..., -1])))
    one_exact = bool(np.all(one_term == 0.0))
    zero_negligible = zero_magnitude < 1e-300 if delta_min >= 0.75 else zero_magnitude <= zero_bound

    passed = bool(difference < 1e-10 and one_exact and zero_negligible)
    return {
        'passed': passed,
        'message': (f'max |dl/ddelta - free-channel gradient| = {difference:.3e}; '
                    f'one-channel term exact zero: {one_exact}; zero-channel term {zero_magnitude:.3e} '
                    f'(delta_min {delta_min:.3g})'),
        'max_difference': difference,
        'one_channel_exact_zero': one_exact,
        'zero_channel_magnitude': zero_magnitude,
        'zero_channel_bound': zero_bound,
        'delta_min': delta_min,
    }


def compare_free_subblock_gradients(model: SSMLayer, x: np.ndarray,
                                    cotangent: Optional[np.ndarray] = None) -> Dict[str, Any]:
    """
    Free-column gradients (A, W_B, W_C rows) of a polarized mixer against the
    unpolarized mixer of the free columns, under the linear loss <cotangent, y>.
    """
    params = model.params
    x = np.asarray(x, dtype=np.float64)
    outputs, tape = forward_with_tape(model, x)
    if cotangent is None:
        cotangent = np.ones_like(outputs)
    full = backward(tape, cotangent).params
    _, sub_tape = forward_with_tape(SSMLayer(free_subblock(params)), x)
    sub = backward(sub_tape, cotangent).params
    free = ~polarized_columns(params.N, params.polarization)
    diffs = {
        'a_diag': relative_error(full['a_diag'][:, free], sub['a_diag']),
        'w_b': relative_error(full['w_b'][free], sub['w_b']),
        'w_c': relative_error(full['w_c'][free], sub['w_c']),
    }
    frozen_zero = bool(np.all(full['a_diag'][:, ~free] == 0.0))
    passed = all(v < 1e-10 for v in diffs.values()) and frozen_zero
    return {
        'passed': passed,
        'message': f'free-block relative differences {diffs}; frozen gradient zero: {frozen_zero}',
        'differences': diffs,
        'frozen_gradient_zero': frozen_zero,
    }
