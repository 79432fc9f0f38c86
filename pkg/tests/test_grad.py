import numpy as np
import pytest

from ssmlab.core import autodiff as ad
from ssmlab.core.config import VARIANTS
from ssmlab.core.errors import NonFiniteError, ShapeMismatchError
from ssmlab.core.grad import (
    backward, check_polarized_delta_gradient, compare_free_subblock_gradients,
    finite_difference, forward_with_tape, gradient_check, relative_error
)
from ssmlab.core.model import MixerStack, SSMLayer
from ssmlab.core.params import MambaParams, PolarizationConfig, init_params

BOTH = PolarizationConfig(one_channel=True, zero_channel=True)

# helpers

def numeric_gradient(fn, value, h=1e-6):
    grad = np.zeros_like(value)
    for i in np.ndindex(value.shape):
        plus, minus = value.copy(), value.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def polarized_layer(rng, D=3, N=6):
    params = init_params('mamba', N, D, seed=int(rng.integers(1 << 30)), polarization=BOTH)
    # step sizes near 1.5 so the zero channel underflows
    return SSMLayer(params.with_tensors({'b_delta': np.full(D, 1.3),
                                         'w_delta': params.w_delta * 0.1}))

# ============================================================================
# tape primitives
# ============================================================================

@pytest.mark.parametrize('op', ('exp', 'sigmoid', 'softplus', 'log_sigmoid', 'log_softmax'))
def test_elementwise_vjp(op, rng):
    x0 = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 4))

    def f(value, record=False):
        tape = ad.Tape(record=record)
        x = tape.leaf(value, 'x')
        return tape, x, getattr(ad, op)(x)

    tape, x, out = f(x0, record=True)
    analytic = tape.backward(out, g)[x.uid]
    numeric = numeric_gradient(lambda v: np.sum(g * f(v)[2].value), x0)
    assert relative_error(analytic, numeric) < 1e-7


def test_broadcast_arithmetic_vjp(rng):
    a0, b0 = rng.normal(size=(2, 3)), rng.normal(size=(3,))
    tape = ad.Tape()
    a, b = tape.leaf(a0, 'a'), tape.leaf(b0, 'b')
    out = ad.reduce_sum((a * b - b) / (1.0 + b * b))
    leaves, _ = ad.gradients_by_name(tape, tape.backward(out, 1.0))
    numeric = numeric_gradient(lambda v: np.sum((a0 * v - v) / (1.0 + v * v)), b0)
    assert relative_error(leaves['b'], numeric) < 1e-7
    assert leaves['a'].shape == (2, 3)


def test_causal_conv_vjp(rng):
    x0, w0, b0 = rng.normal(size=(2, 7, 3)), rng.normal(size=(4, 3)), rng.normal(size=3)
    g = rng.normal(size=(2, 7, 3))

    def f(x, w, b):
        tape = ad.Tape(record=False)
        return ad.causal_conv(tape.leaf(x), tape.leaf(w), tape.leaf(b)).value

    tape = ad.Tape()
    out = ad.causal_conv(tape.leaf(x0, 'x'), tape.leaf(w0, 'w'), tape.leaf(b0, 'b'))
    leaves, _ = ad.gradients_by_name(tape, tape.backward(out, g))
    assert relative_error(leaves['x'], numeric_gradient(lambda v: np.sum(g * f(v, w0, b0)), x0)) < 1e-7
    assert relative_error(leaves['w'], numeric_gradient(lambda v: np.sum(g * f(x0, v, b0)), w0)) < 1e-7
    # output at t=0 never sees later inputs
    assert np.all(f(x0, w0, b0)[:, 0] == x0[:, 0] * w0[0] + b0)


def test_untaped_forward_matches_replay(rng):
    layer = SSMLayer(init_params('gla', 4, 3, seed=0))
    x = rng.normal(size=(12, 3))
    outputs, tape = forward_with_tape(layer, x)
    assert tape.verify_replay()
    untaped = ad.Tape(record=False)
    p = {name: untaped.leaf(v, name) for name, v in layer.tensors().items()}
    assert np.array_equal(layer.forward_vars(untaped, untaped.leaf(x, 'x'), p).value, outputs)


def test_non_finite_operation_is_located():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, -1.0]), 'x')
    y = ad.exp(x) * 0.0
    with pytest.raises(NonFiniteError) as e:
        ad.log(y)
    assert e.value.op == 'log'
    assert e.value.operation_index == 2


def test_cotangent_shape_checked(rng):
    outputs, tape = forward_with_tape(SSMLayer(init_params('s4', 4, 2, seed=0)), rng.normal(size=(5, 2)))
    with pytest.raises(ShapeMismatchError):
        backward(tape, np.ones((4, 2)))

# ============================================================================
# model gradients
# ============================================================================

@pytest.mark.parametrize('variant', VARIANTS)
def test_layer_gradients_match_finite_differences(variant, rng):
    N = 1 if variant == 'griffin' else 4
    layer = SSMLayer(init_params(variant, N, 2, seed=5))
    x = rng.normal(size=(10, 2))
    cotangent = rng.normal(size=(10, 2))
    rows = gradient_check(layer, x, cotangent, max_entries=8)
    assert rows[0]['tensor'] == 'x'
    assert all(row['pass'] for row in rows), rows


def test_stack_gradients_match_finite_differences(rng):
    stack = MixerStack([init_params('mamba', 4, 2, seed=i) for i in range(3)])
    rows = gradient_check(stack, rng.normal(size=(8, 2)), rng.normal(size=(8, 2)), max_entries=6)
    assert all(row['pass'] for row in rows), rows


def test_input_gradient_column(rng):
    layer = SSMLayer(init_params('mamba', 4, 3, seed=1))
    x = rng.normal(size=(9, 3))
    cotangent = np.zeros((9, 3))
    cotangent[8, 0] = 1.0
    _, tape = forward_with_tape(layer, x)
    grads = backward(tape, cotangent)
    numeric = np.array([finite_difference(layer, x, (s, 1))[8, 0] for s in range(9)])
    assert np.max(np.abs(grads.inputs[:, 1] - numeric)) < 1e-6
    assert grads.all_finite()

# ============================================================================
# polarization
# ============================================================================

def test_polarized_delta_gradient(rng):
    layer = polarized_layer(rng)
    report = check_polarized_delta_gradient(layer, rng.normal(size=(16, 3)))
    assert report['passed'], report['message']
    assert report['one_channel_exact_zero']
    assert report['delta_min'] >= 0.75


def test_free_block_gradients_unchanged(rng):
    report = compare_free_subblock_gradients(polarized_layer(rng), rng.normal(size=(16, 3)))
    assert report['passed'], report['message']


def test_delta_gradient_needs_both_channels(rng):
    layer = SSMLayer(init_params('mamba', 4, 2, seed=0, polarization=PolarizationConfig(one_channel=True)))
    assert not check_polarized_delta_gradient(layer, rng.normal(size=(4, 2)))['passed']


def test_frozen_entries_report_zero_gradient(rng):
    layer = SSMLayer(init_params('s4', 5, 2, seed=0, polarization=BOTH))
    _, tape = forward_with_tape(layer, rng.normal(size=(6, 2)))
    grads = backward(tape, np.ones((6, 2)))
    assert np.all(grads.params['a_diag'][:, [0, -1]] == 0.0)
    assert np.any(grads.params['a_diag'][:, 1:-1] != 0.0)
