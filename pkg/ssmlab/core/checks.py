"""
Theorem checks: seeded random sweeps that verify the library's claims.

Each check returns {'passed', 'message', ...} and optionally a 'table'
DataFrame for CSV output; run_all_checks rolls them up into
{'checks', 'overall_passed'}.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ssmlab.core.analysis import (
    bound_frame, check_envelope, fit_decay_rate, frequency_response, influence_matrix,
    layerwise_smoothness, oversmoothing_check
)
from ssmlab.core.config import VARIANTS, CheckConfig, TrainConfig
from ssmlab.core.grad import (
    backward, check_polarized_delta_gradient, compare_free_subblock_gradients,
    forward_with_tape, gradient_check, gradient_report_frame
)
from ssmlab.core.model import MixerStack, SSMLayer
from ssmlab.core.params import (
    MambaParams, PolarizationConfig, S4Params, coefficients_from_params, init_params, inverse_softplus
)
from ssmlab.core.scan import StepCoefficients, scan_parallel, scan_recurrent
from ssmlab.core.training import Adam

logger = logging.getLogger(__name__)

PARALLEL_TOL_REAL = 1e-10
PARALLEL_TOL_COMPLEX = 1e-8
INFLUENCE_TOL = 1e-12
FLAT_DECAY_TOL = 0.01
POLARIZATION_TOL = 1e-10


def _random_coefficients(rng: np.random.Generator, index: int) -> Tuple[str, StepCoefficients]:
    """Coefficients of a random instance: every variant in turn, then a complex S4-style one."""
    kinds = VARIANTS + ('complex',)
    kind = kinds[index % len(kinds)]
    T = int(rng.integers(1, 129))
    N = int(rng.integers(1, 33))
    D = int(rng.integers(1, 4))
    if kind == 'complex':
        radius = rng.uniform(0.05, 0.999, size=(T, D, N))
        phase = rng.uniform(-np.pi, np.pi, size=(T, D, N))
        a = radius * np.exp(1j * phase)
        b = rng.normal(size=(T, D, N)) + 1j * rng.normal(size=(T, D, N))
        c = rng.normal(size=(T, D, N)) + 1j * rng.normal(size=(T, D, N))
        delta = rng.uniform(0.01, 1.0, size=(T, D))
        return kind, StepCoefficients(a=a, b=b, c=c, delta=delta)
    params = init_params(kind, N, D, int(rng.integers(0, 2 ** 31)))
    x = rng.normal(size=(T, D))
    return kind, coefficients_from_params(params, x)


def check_parallel_form(instances: int, seed: int = 0) -> Dict[str, Any]:
    """Recurrent and parallel forms agree on random instances of every variant."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(instances):
        kind, coeffs = _random_coefficients(rng, i)
        diff = float(np.max(np.abs(scan_recurrent(coeffs).states - scan_parallel(coeffs).states)))
        tol = PARALLEL_TOL_COMPLEX if coeffs.is_complex else PARALLEL_TOL_REAL
        rows.append({'instance': i, 'variant': kind, 'T': coeffs.T, 'N': coeffs.N,
                     'max_abs_diff': diff, 'pass': diff < tol})
    table = pd.DataFrame(rows, columns=['instance', 'variant', 'T', 'N', 'max_abs_diff', 'pass'])
    failed = int((~table['pass']).sum())
    return {
        'passed': failed == 0,
        'message': f'{failed} of {instances} instance(s) exceed tolerance' if failed
                   else f'{instances} instances agree',
        'max_abs_diff': float(table['max_abs_diff'].max()) if instances else 0.0,
        'table': table,
    }


def _random_layer(rng: np.random.Generator, index: int):
    variant = VARIANTS[index % len(VARIANTS)]
    D = int(rng.integers(1, 4))
    N = int(rng.integers(1, 4))
    polarization = None
    if variant in ('s4', 'mamba') and index % 3 == 0:
        polarization = PolarizationConfig(one_channel=True, zero_channel=True)
        N += 2
    params = init_params(variant, N, D, int(rng.integers(0, 2 ** 31)), polarization=polarization)
    if variant == 's4' and polarization is not None:
        # keep exp(zero_value * delta) smooth enough for central differences
        params = params.with_tensors({'delta': rng.uniform(0.3, 0.9, size=D)})
    return SSMLayer(params)


def check_gradients(instances: int, seed: int = 0, max_entries: int = 8) -> Dict[str, Any]:
    """Analytic gradients of random layers match central differences."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(instances):
        layer = _random_layer(rng, i)
        T = int(rng.integers(2, 9))
        x = rng.normal(size=(T, layer.D))
        cotangent = rng.normal(size=(T, layer.D))
        for row in gradient_check(layer, x, cotangent, max_entries=max_entries, seed=i):
            rows.append({'variant': layer.variant, 'seed': i, **row})
    table = gradient_report_frame(rows)
    failed = int((~table['pass'].astype(bool)).sum())
    return {
        'passed': failed == 0,
        'message': f'{failed} tensor check(s) failed' if failed
                   else f'{len(table)} tensor checks over {instances} instances passed',
        'max_rel_err': float(table['max_rel_err'].max()) if len(table) else 0.0,
        'table': table,
    }


def check_recency(T: int, models: int, seed: int = 0) -> Dict[str, Any]:
    """
    Influence decay: the closed form for constant-gate S4, the envelope bound
    on random Mamba layers, no decay for linear attention, and a flat tail
    once the one-channel is present.
    """
    results: Dict[str, Any] = {}

    # constant scalar S4 with a = 0.5, delta = b = c = 1
    s4 = SSMLayer(S4Params(a_diag=np.array([[np.log(0.5)]]), b=np.array([[1.0]]),
                           c=np.array([[1.0]]), delta=np.array([1.0])))
    short = 16
    rng = np.random.default_rng(seed)
    m = influence_matrix(s4, rng.normal(size=(short, 1)))
    t, s = np.tril_indices(short)
    closed = 0.5 ** (t - s)
    err = float(np.max(np.abs(m.scores[t, s] - closed)))
    fit = fit_decay_rate(m)
    exact = err < INFLUENCE_TOL and abs(fit.kappa_hat - np.log(2.0)) < 1e-9 and fit.r_squared > 1 - 1e-9
    results['constant_gate'] = {'passed': bool(exact),
                                'message': f'max error {err:.2e}, kappa_hat {fit.kappa_hat:.6f}',
                                'kappa_hat': fit.kappa_hat, 'r_squared': fit.r_squared}

    envelopes = []
    for k in range(models):
        layer = SSMLayer(init_params('mamba', 8, 4, seed + k))
        m = influence_matrix(layer, rng.normal(size=(T, 4)))
        envelopes.append(check_envelope(fit_decay_rate(m)))
    results['mamba_envelope'] = {
        'passed': all(e['passed'] for e in envelopes),
        'message': '; '.join(e['message'] for e in envelopes),
    }

    la = SSMLayer(init_params('la', 4, 3, seed))
    constant_x = np.tile(rng.normal(size=(1, 3)), (32, 1))
    fit = fit_decay_rate(influence_matrix(la, constant_x), lag_window=(1, 31))
    results['linear_attention'] = {'passed': bool(fit.defined and abs(fit.kappa_hat) <= FLAT_DECAY_TOL),
                                   'message': f'kappa_hat {fit.kappa_hat:.2e}', 'kappa_hat': fit.kappa_hat}

    polarized = SSMLayer(init_params('s4', 3, 1, seed, polarization=PolarizationConfig(one_channel=True)))
    polarized = SSMLayer(polarized.params.with_tensors({'delta': np.array([0.5])}))
    fit = fit_decay_rate(influence_matrix(polarized, rng.normal(size=(T, 1))), lag_window=(T // 2, T - 1))
    results['one_channel_tail'] = {'passed': bool(fit.defined and abs(fit.kappa_hat) <= 1e-6),
                                   'message': f'tail kappa_hat {fit.kappa_hat:.2e}', 'kappa_hat': fit.kappa_hat}

    passed = all(r['passed'] for r in results.values())
    return {'passed': passed,
            'message': ', '.join(f'{k}: {"ok" if r["passed"] else "FAILED"}' for k, r in results.items()),
            'parts': results}


def _centered(rng: np.random.Generator, T: int, D: int, N: int) -> np.ndarray:
    # drive with min <= 0 <= max in every (d, n) column
    b = rng.normal(size=(T, D, N))
    lo, hi = rng.choice(T, size=2, replace=False)
    b[lo] = -np.abs(b[lo])
    b[hi] = np.abs(b[hi])
    return b


def random_bound_instance(rng: np.random.Generator, condition: str) -> StepCoefficients:
    """Random coefficients satisfying condition (i) or (ii), with a centered drive."""
    T = int(rng.integers(2, 65))
    D = int(rng.integers(1, 4))
    N = int(rng.integers(1, 5))
    delta = rng.uniform(0.01, 0.99, size=(T, D))
    if condition == 'i':
        a = np.repeat((1.0 - delta)[..., None], N, axis=-1)
    else:
        a = rng.uniform(0.01, 1.0, size=(T, D, N)) * (1.0 - delta)[..., None]
    b = _centered(rng, T, D, N)
    c = rng.normal(size=(T, D, N))
    return StepCoefficients(a=a, b=b, c=c, delta=delta)


def hand_bound_instance() -> StepCoefficients:
    """T=2, a=0.5, delta=0.5, b=(1, -1): lhs 0.75, rhs 1."""
    return StepCoefficients(a=np.full((2, 1, 1), 0.5), b=np.array([1.0, -1.0]).reshape(2, 1, 1),
                            c=np.ones((2, 1, 1)), delta=np.full((2, 1), 0.5))


def check_oversmoothing(instances: int, seed: int = 0) -> Dict[str, Any]:
    """Zero bound violations on random condition-(i) and condition-(ii) instances."""
    rng = np.random.default_rng(seed)
    reports = []
    hand = oversmoothing_check(hand_bound_instance())
    hand_ok = (hand.satisfied is True and abs(hand.lhs[0] - 0.75) < 1e-15 and abs(hand.rhs[0] - 1.0) < 1e-15)
    counts = {}
    for condition in ('i', 'ii'):
        violations = 0
        for _ in range(instances):
            report = oversmoothing_check(random_bound_instance(rng, condition))
            reports.append(report)
            if report.satisfied is not True:
                violations += 1
        counts[condition] = violations
    table = bound_frame(reports)
    passed = hand_ok and not any(counts.values())
    return {
        'passed': bool(passed),
        'message': (f'violations: condition (i) {counts["i"]}, condition (ii) {counts["ii"]} '
                    f'of {instances} each; hand instance {"ok" if hand_ok else "FAILED"}'),
        'violations': counts,
        'table': table,
    }


def random_complex_s4(rng: np.random.Generator, N: int = 8) -> S4Params:
    a = -rng.uniform(0.1, 2.0, size=(1, N)) + 1j * rng.uniform(-10.0, 10.0, size=(1, N))
    b = rng.normal(size=(1, N)) + 1j * rng.normal(size=(1, N))
    c = rng.normal(size=(1, N)) + 1j * rng.normal(size=(1, N))
    return S4Params(a_diag=a, b=b, c=c, delta=np.array([1.0]))


def check_lowpass(instances: int, seed: int = 0, epsilons=(0.1, 0.01)) -> Dict[str, Any]:
    """Single-pole magnitude, and |Z| <= eps beyond the cutoff on random complex S4 kernels."""
    single = S4Params(a_diag=np.array([[-1.0]]), b=np.array([[1.0]]), c=np.array([[1.0]]),
                      delta=np.array([1.0]))
    response = frequency_response(single, epsilons=epsilons)
    closed = 1.0 / np.sqrt(1.0 + response.omega ** 2)
    single_err = float(np.max(np.abs(response.magnitude[0] - closed)))
    cutoff_ok = abs(response.cutoffs[0.01][0] - 101.0) < 1e-12 if 0.01 in response.cutoffs else True
    single_ok = single_err < 1e-12 and cutoff_ok and response.monotone_tail is not False

    rng = np.random.default_rng(seed)
    rows, failed = [], 0
    for i in range(instances):
        r = frequency_response(random_complex_s4(rng), epsilons=epsilons)
        ok = all(r.verified.values()) and r.bound_holds
        failed += int(not ok)
        for eps in epsilons:
            rows.append({'instance': i, 'epsilon': eps, 'cutoff': float(r.cutoffs[eps][0]),
                         'magnitude_at_cutoff': float(r.at_cutoff[eps][0]), 'pass': ok})
    table = pd.DataFrame(rows, columns=['instance', 'epsilon', 'cutoff', 'magnitude_at_cutoff', 'pass'])
    return {
        'passed': bool(single_ok and failed == 0),
        'message': f'single pole error {single_err:.2e}; {failed} of {instances} random kernel(s) failed',
        'table': table,
    }


def random_polarized_layer(rng: np.random.Generator, D: int, N: int) -> SSMLayer:
    """Both-polarized Mamba layer with every step size around 1.5."""
    polarization = PolarizationConfig(one_channel=True, zero_channel=True)
    params = init_params('mamba', N + 2, D, int(rng.integers(0, 2 ** 31)), polarization=polarization)
    params = params.with_tensors({
        'w_delta': params.w_delta * 0.1,
        'b_delta': inverse_softplus(rng.uniform(1.2, 2.0, size=D)),
    })
    return SSMLayer(params)


def check_polarization(instances: int, steps: int, seed: int = 0) -> Dict[str, Any]:
    """
    Polarized delta gradients equal their free-channel part, free-column
    gradients match the unpolarized sub-block, and polarized entries survive
    optimizer steps bit for bit.
    """
    rng = np.random.default_rng(seed)
    failures = []
    for i in range(instances):
        layer = random_polarized_layer(rng, int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        x = rng.normal(size=(int(rng.integers(2, 17)), layer.D))
        cotangent = rng.normal(size=x.shape)
        delta_check = check_polarized_delta_gradient(layer, x, cotangent)
        block_check = compare_free_subblock_gradients(layer, x, cotangent)
        if not (delta_check['passed'] and block_check['passed']):
            failures.append(i)

    layer = random_polarized_layer(rng, 3, 4)
    initial = layer.params.a_diag.copy()
    frozen = layer.frozen()
    optimizer = Adam(TrainConfig(learning_rate=1e-2))
    x = rng.normal(size=(12, 3))
    cotangent = rng.normal(size=x.shape)
    for _ in range(steps):
        _, tape = forward_with_tape(layer, x)
        grads = backward(tape, cotangent).params
        layer = layer.with_tensors(optimizer.update(layer.tensors(), grads, frozen))
    columns = frozen['a_diag']
    frozen_ok = bool(np.array_equal(layer.params.a_diag[columns], initial[columns]))
    moved = bool(not np.array_equal(layer.params.a_diag[~columns], initial[~columns]))
    return {
        'passed': not failures and frozen_ok and moved,
        'message': (f'{len(failures)} of {instances} gradient instance(s) failed; polarized entries '
                    f'{"unchanged" if frozen_ok else "CHANGED"} after {steps} steps'),
        'failed_instances': failures[:10],
    }


def convex_s4_stack(rng: np.random.Generator, layers: int = 8, D: int = 4) -> MixerStack:
    """Stack of time-invariant layers with a + delta = 1, b = c = 1, N = 1, no residual."""
    stack = []
    for _ in range(layers):
        a = rng.uniform(0.3, 0.6, size=D)
        delta = 1.0 - a
        stack.append(S4Params(a_diag=(np.log(a) / delta)[:, None], b=np.ones((D, 1)),
                              c=np.ones((D, 1)), delta=delta))
    return MixerStack(stack, residual=False)


def check_smoothness_stack(inputs: int = 100, seed: int = 0, T: int = 128) -> Dict[str, Any]:
    """
    On a convex stack, every layer satisfies the over-smoothing bound and the
    block-output smoothness of the last layer is at most that of the first on
    at least 90% of inputs. Inputs start at 0 so the drive straddles zero.
    """
    rng = np.random.default_rng(seed)
    stack = convex_s4_stack(rng)
    decreasing, bound_ok = 0, True
    for _ in range(inputs):
        x = 1.0 + rng.normal(size=(T, stack.D))
        x[0] = 0.0
        report = layerwise_smoothness(stack, x)
        eps = report.block_epsilons()
        decreasing += int(eps[-1] <= eps[0])
        bound_ok = bound_ok and all(b.satisfied is True for b in report.bounds)
    share = decreasing / inputs if inputs else 1.0
    return {
        'passed': bool(bound_ok and share >= 0.9),
        'message': f'last <= first on {share:.0%} of inputs; per-layer bound {"ok" if bound_ok else "VIOLATED"}',
        'share_decreasing': share,
    }


def _check_runners(cfg: CheckConfig) -> Dict[str, Callable[[], Dict[str, Any]]]:
    return {
        'parallel_form': lambda: check_parallel_form(cfg.parallel_instances, cfg.seed),
        'gradients': lambda: check_gradients(cfg.gradient_instances, cfg.seed),
        'recency': lambda: check_recency(cfg.envelope_length, cfg.envelope_models, cfg.seed),
        'oversmoothing': lambda: check_oversmoothing(cfg.bound_instances, cfg.seed),
        'lowpass': lambda: check_lowpass(cfg.lowpass_instances, cfg.seed),
        'polarization': lambda: check_polarization(cfg.polarization_instances, cfg.polarization_steps, cfg.seed),
        'smoothness_stack': lambda: check_smoothness_stack(seed=cfg.seed),
    }


CHECK_NAMES = ('parallel_form', 'gradients', 'recency', 'oversmoothing', 'lowpass',
               'polarization', 'smoothness_stack')


def run_check(name: str, cfg: CheckConfig) -> Dict[str, Any]:
    """Run one named check; module-level so worker processes can pickle it."""
    result = _check_runners(cfg)[name]()
    logger.info(f'check {name}: {"passed" if result["passed"] else "FAILED"} ({result["message"]})')
    return result


def run_all_checks(cfg: CheckConfig, workers: int = 1,
                   names: Optional[List[str]] = None) -> Dict[str, Any]:
    """
    Run the suite; results are collected in suite order whatever the
    worker count.
    """
    names = list(names or CHECK_NAMES)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_check, names, [cfg] * len(names)))
    else:
        outcomes = [run_check(name, cfg) for name in names]
    results = {'checks': dict(zip(names, outcomes)), 'overall_passed': True}
    for outcome in outcomes:
        if not outcome['passed']:
            results['overall_passed'] = False
    return results
