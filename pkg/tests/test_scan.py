import numpy as np
import pytest

from ssmlab.core.errors import ModeError, ParameterRangeError, ShapeMismatchError
from ssmlab.core.scan import (
    StepCoefficients, coefficients_to_frame, cumulative_weights, load_coefficients,
    save_coefficients, scan_parallel, scan_recurrent, validate_coefficients
)

# helpers

def random_coeffs(rng, T=64, D=2, N=16, complex_mode=False):
    if complex_mode:
        a = rng.uniform(0.1, 0.99, (T, D, N)) * np.exp(1j * rng.uniform(-np.pi, np.pi, (T, D, N)))
        b = rng.normal(size=(T, D, N)) + 1j * rng.normal(size=(T, D, N))
    else:
        a = rng.uniform(0.01, 0.99, (T, D, N))
        b = rng.normal(size=(T, D, N))
    return StepCoefficients(a=a, b=b, c=rng.normal(size=(T, D, N)),
                            delta=rng.uniform(0.1, 1.0, (T, D)))


def diff(x, y):
    return np.max(np.abs(x - y))

# ============================================================================
# recurrence
# ============================================================================

def test_hand_unrolled_recurrence():
    coeffs = StepCoefficients.from_steps([(0.5, 1.0, 1.0, 1.0)] * 3)
    traj = scan_recurrent(coeffs)
    assert traj.states[0, 0, 0] == 0.0
    assert traj.states[3, 0, 0] == pytest.approx(1.75, abs=1e-15)
    assert traj.outputs[2, 0] == pytest.approx(1.75, abs=1e-15)


def test_complex_single_mode():
    a = 0.5 * np.exp(1j * np.pi / 4)
    coeffs = StepCoefficients.from_steps([([a], [1.0], [1.0], 1.0)] * 2)
    for scan in (scan_recurrent, scan_parallel):
        h = scan(coeffs).states[2, 0, 0]
        assert abs(h - (a + 1)) < 1e-12


def test_truncated_length():
    coeffs = StepCoefficients.from_steps([(0.5, 1.0, 1.0, 1.0)] * 3)
    assert scan_recurrent(coeffs, T=2).states[-1, 0, 0] == pytest.approx(1.5)
    with pytest.raises(ShapeMismatchError):
        scan_recurrent(coeffs, T=4)


@pytest.mark.parametrize('complex_mode', (False, True))
@pytest.mark.parametrize('T', (1, 64, 128))
def test_parallel_matches_recurrent(complex_mode, T):
    coeffs = random_coeffs(np.random.default_rng(T), T=T, complex_mode=complex_mode)
    tol = 1e-8 if complex_mode else 1e-10
    assert diff(scan_recurrent(coeffs).states, scan_parallel(coeffs).states) < tol


def test_parallel_handles_zero_and_negative_gates(rng):
    a = rng.uniform(-0.9, 0.9, (40, 1, 4))
    a[5] = 0.0
    coeffs = StepCoefficients(a=a, b=rng.normal(size=a.shape), c=np.ones(a.shape),
                              delta=np.ones((40, 1)))
    assert diff(scan_recurrent(coeffs).states, scan_parallel(coeffs).states) < 1e-10


def test_cumulative_weights(rng):
    coeffs = random_coeffs(rng, T=10, D=1, N=3)
    w = cumulative_weights(coeffs, 9)
    assert w.shape == (10, 1, 3)
    assert np.all(w[9] == 1.0)
    assert diff(w[0], np.prod(coeffs.a[1:10], axis=0)) < 1e-15
    h = np.sum(w * coeffs.drive()[:10], axis=0)
    assert diff(h, scan_recurrent(coeffs).states[10]) < 1e-12


def test_retnet_style_constant_gate_power():
    T = 10
    coeffs = StepCoefficients(a=np.full((T, 1, 1), 0.9), b=np.ones((T, 1, 1)),
                              c=np.ones((T, 1, 1)), delta=np.ones((T, 1)))
    assert cumulative_weights(coeffs, T - 1)[0, 0, 0] == pytest.approx(0.9 ** 9, rel=1e-12)

# ============================================================================
# validation
# ============================================================================

def test_step_shape_mismatch_reports_step():
    steps = [([0.5, 0.5], [1.0, 1.0], [1.0, 1.0], 1.0)] * 2 + [([0.5], [1.0], [1.0], 1.0)]
    with pytest.raises(ShapeMismatchError) as e:
        StepCoefficients.from_steps(steps)
    assert e.value.step == 2


def test_nonpositive_delta_rejected():
    with pytest.raises(ParameterRangeError):
        StepCoefficients.from_steps([(0.5, 1.0, 1.0, 0.0)])


def test_continuous_mode_cannot_be_scanned():
    coeffs = StepCoefficients.from_steps([(-1.0, 1.0, 1.0, 1.0)], mode='continuous')
    with pytest.raises(ModeError):
        scan_recurrent(coeffs)
    with pytest.raises(ModeError):
        StepCoefficients.from_steps([(0.5, 1.0, 1.0, 1.0)], mode='hybrid')


def test_validate_reports_range_and_conditions(rng):
    coeffs = random_coeffs(rng, T=20, D=3, N=4)
    report = validate_coefficients(coeffs)
    assert np.array_equal(report.a_max, np.abs(coeffs.a).max(axis=(0, 2)))
    assert np.array_equal(report.a_min, np.abs(coeffs.a).min(axis=(0, 2)))
    assert report.mode_violations == 0
    assert report.strictly_interior


def test_validate_flags_unstable_entries():
    coeffs = StepCoefficients.from_steps([(1.5, 1.0, 1.0, 0.5), (1.0, 1.0, 1.0, 0.5)])
    report = validate_coefficients(coeffs)
    assert report.mode_violations == 1
    assert report.violation_indices == [(0, 0, 0)]
    assert report.boundary_entries == 1
    assert not report.strictly_interior


def test_validate_convex_conditions():
    convex = StepCoefficients.from_steps([(0.3, 1.0, 1.0, 0.7), (0.6, -1.0, 1.0, 0.4)])
    report = validate_coefficients(convex)
    assert report.satisfies_condition_i and report.satisfies_condition_ii
    sub = StepCoefficients.from_steps([(0.3, 1.0, 1.0, 0.5)])
    report = validate_coefficients(sub)
    assert not report.satisfies_condition_i and report.satisfies_condition_ii

# ============================================================================
# files
# ============================================================================

def test_save_and_load_with_trajectory(tmp_path, rng):
    coeffs = random_coeffs(rng, T=8, D=2, N=3, complex_mode=True)
    traj = scan_recurrent(coeffs)
    checksum = save_coefficients(tmp_path / 'c.ssmc', coeffs, traj)
    assert len(checksum) == 64
    loaded, loaded_traj = load_coefficients(tmp_path / 'c.ssmc')
    assert np.array_equal(loaded.a, coeffs.a)
    assert np.array_equal(loaded_traj.states, traj.states)


def test_coefficients_frame_columns(rng):
    coeffs = random_coeffs(rng, T=4, D=2, N=3)
    frame = coefficients_to_frame(coeffs, scan_recurrent(coeffs))
    assert list(frame.columns) == ['d', 't', 'n', 'a_re', 'a_im', 'b', 'c', 'delta', 'h']
    assert len(frame) == 4 * 2 * 3
    assert frame['t'].min() == 1
