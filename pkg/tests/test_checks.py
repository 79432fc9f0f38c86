import numpy as np
import pytest

from ssmlab.core.analysis import oversmoothing_check
from ssmlab.core.checks import (
    CHECK_NAMES, check_gradients, check_lowpass, check_oversmoothing, check_parallel_form,
    check_polarization, check_recency, check_smoothness_stack, hand_bound_instance,
    random_bound_instance, run_all_checks
)
from ssmlab.core.config import CheckConfig

QUICK = CheckConfig(parallel_instances=16, gradient_instances=7, bound_instances=20,
                    lowpass_instances=5, polarization_instances=3, polarization_steps=5,
                    envelope_length=64, envelope_models=1, seed=0)


def test_parallel_form_sweep():
    result = check_parallel_form(16, seed=1)
    assert result['passed'], result['message']
    assert set(result['table']['variant']) >= {'s4', 'mamba', 'complex'}


def test_gradient_sweep_covers_every_variant():
    result = check_gradients(7, seed=0, max_entries=4)
    assert result['passed'], result['table'][~result['table']['pass']]
    assert result['table']['variant'].nunique() == 7
    assert list(result['table'].columns) == ['variant', 'seed', 'tensor', 'max_rel_err', 'pass']


def test_recency_parts():
    result = check_recency(64, 1, seed=0)
    assert result['passed'], result['message']
    assert set(result['parts']) == {'constant_gate', 'mamba_envelope', 'linear_attention', 'one_channel_tail'}
    assert result['parts']['constant_gate']['kappa_hat'] == pytest.approx(np.log(2.0))


def test_bound_instances_meet_their_condition(rng):
    for condition in ('i', 'ii'):
        for _ in range(10):
            report = oversmoothing_check(random_bound_instance(rng, condition))
            flags = report.condition_i if condition == 'i' else report.condition_ii
            assert flags.all()
            assert report.drive_centered.all()


def test_oversmoothing_sweep():
    result = check_oversmoothing(20, seed=0)
    assert result['passed'], result['message']
    assert len(result['table']) == 40
    hand = oversmoothing_check(hand_bound_instance())
    assert (hand.lhs[0], hand.rhs[0]) == (0.75, 1.0)


def test_lowpass_sweep():
    result = check_lowpass(5, seed=0)
    assert result['passed'], result['message']
    assert (result['table']['magnitude_at_cutoff'] <= result['table']['epsilon']).all()


def test_polarization_sweep():
    result = check_polarization(3, steps=5, seed=0)
    assert result['passed'], result['message']


def test_smoothness_stack_small():
    result = check_smoothness_stack(inputs=10, seed=0, T=32)
    assert 'share_decreasing' in result
    assert 'VIOLATED' not in result['message']


def test_suite_rollup():
    results = run_all_checks(QUICK, names=['parallel_form', 'lowpass'])
    assert list(results['checks']) == ['parallel_form', 'lowpass']
    assert results['overall_passed']


@pytest.mark.slow
def test_full_suite():
    results = run_all_checks(CheckConfig(), workers=4)
    assert list(results['checks']) == list(CHECK_NAMES)
    failed = {k: v['message'] for k, v in results['checks'].items() if not v['passed']}
    assert results['overall_passed'], failed
