import numpy as np
import pytest

from ssmlab.core.config import VARIANTS
from ssmlab.core.errors import ParameterRangeError, ShapeMismatchError
from ssmlab.core.params import (
    LAMParams, MambaParams, PolarizationConfig, S4Params, apply_polarization, build_lam,
    build_mamba, build_s4, coefficients_from_params, init_params, load_params,
    polarized_columns, save_params
)
from ssmlab.core.scan import cumulative_weights, scan_recurrent, validate_coefficients

BOTH = PolarizationConfig(one_channel=True, zero_channel=True)

# ============================================================================
# S4 / Mamba
# ============================================================================

def test_s4_discretization():
    params = S4Params(a_diag=[-1.0, -2.0], b=[1.0, 1.0], c=[1.0, 1.0], delta=0.1)
    coeffs = build_s4(params, np.ones((5, 1)))
    assert coeffs.a[0, 0] == pytest.approx([np.exp(-0.1), np.exp(-0.2)], abs=1e-15)
    assert coeffs.a[0, 0] == pytest.approx([0.9048, 0.8187], abs=1e-4)
    assert np.all(coeffs.a == coeffs.a[0])
    assert np.all(coeffs.delta == 0.1)


def test_s4_rejects_nonnegative_a():
    with pytest.raises(ParameterRangeError):
        S4Params(a_diag=[-1.0, 0.0], b=[1.0, 1.0], c=[1.0, 1.0], delta=0.1)
    with pytest.raises(ParameterRangeError):
        S4Params(a_diag=[-1.0], b=[1.0], c=[1.0], delta=1.5)


def test_mamba_step_size_is_softplus():
    params = MambaParams(a_diag=[[-1.0]], w_delta=[[1.0]], b_delta=[0.0],
                         w_b=[[1.0]], w_c=[[1.0]])
    coeffs = build_mamba(params, np.full((3, 1), 0.5412))
    assert coeffs.delta[0, 0] == pytest.approx(1.0, abs=1e-3)


def test_mamba_gates_strictly_inside_unit_interval(rng):
    params = init_params('mamba', 8, 4, seed=1)
    coeffs = build_mamba(params, rng.normal(size=(32, 4)) * 3)
    assert np.all(coeffs.a > 0) and np.all(coeffs.a < 1)
    report = validate_coefficients(coeffs)
    assert np.array_equal(report.a_max, coeffs.a.max(axis=(0, 2)))
    assert np.array_equal(report.a_min, coeffs.a.min(axis=(0, 2)))


def test_mamba_weight_shape_mismatch():
    with pytest.raises(ShapeMismatchError) as e:
        MambaParams(a_diag=-np.ones((2, 3)), w_delta=np.ones((2, 2)), b_delta=np.zeros(2),
                    w_b=np.ones((3, 5)), w_c=np.ones((3, 2)))
    assert e.value.dimension == 'w_b'


def test_input_channel_mismatch():
    params = init_params('s4', 4, 3, seed=0)
    with pytest.raises(ShapeMismatchError):
        coefficients_from_params(params, np.ones((5, 2)))

# ============================================================================
# linear-attention family
# ============================================================================

def test_retnet_constant_decay():
    params = init_params('retnet', 4, 2, seed=0)
    assert params.gamma == pytest.approx(0.9)
    coeffs = build_lam(params, np.random.default_rng(0).normal(size=(10, 2)))
    assert cumulative_weights(coeffs, 9)[0, 0, 0] == pytest.approx(0.9 ** 9, rel=1e-12)
    assert cumulative_weights(coeffs, 9)[0, 0, 0] == pytest.approx(0.3874, abs=1e-4)


def test_linear_attention_has_unit_gate(rng):
    coeffs = build_lam(init_params('la', 4, 2, seed=0), rng.normal(size=(6, 2)))
    assert np.all(coeffs.a == 1.0)


def test_gla_keys_are_per_channel_and_gate_is_shared(rng):
    params = init_params('gla', 4, 3, seed=0)
    assert params.weights['w_k'].shape == (3, 4, 3)
    assert params.weights['w_q'].shape == (3, 4, 3)
    x = rng.normal(size=(8, 3))
    before = build_lam(params, x)
    w_k = params.weights['w_k'].copy()
    w_k[1] += 0.5
    after = build_lam(params.with_tensors({'w_k': w_k}), x)
    assert not np.allclose(after.b[:, 1], before.b[:, 1])
    assert np.array_equal(after.b[:, [0, 2]], before.b[:, [0, 2]])
    assert np.array_equal(after.c, before.c)
    assert np.array_equal(before.a, np.broadcast_to(before.a[:, :1], before.a.shape))


def test_rwkv_gate_and_step_sum_to_one(rng):
    coeffs = build_lam(init_params('rwkv', 4, 3, seed=0), rng.normal(size=(12, 3)))
    total = coeffs.a + coeffs.delta[..., None]
    assert np.max(np.abs(total - 1.0)) < 1e-12
    assert validate_coefficients(coeffs).satisfies_condition_i


def test_rwkv_rejects_negative_decay():
    with pytest.raises(ParameterRangeError):
        LAMParams(lam_variant='rwkv', weights={'w': -np.ones(2), 'w_k': np.eye(2),
                                               'w_v': np.ones((3, 2)), 'w_q': np.ones((3, 2))})


def test_griffin_normalized_step(rng):
    coeffs = build_lam(init_params('griffin', 1, 3, seed=0), rng.normal(size=(12, 3)))
    assert coeffs.N == 1
    assert np.max(np.abs(coeffs.a[..., 0] ** 2 + coeffs.delta ** 2 - 1.0)) < 1e-12


def test_missing_lam_weight():
    with pytest.raises(ShapeMismatchError):
        LAMParams(lam_variant='la', weights={'w_k': np.ones((2, 2))})


@pytest.mark.parametrize('variant', VARIANTS)
def test_every_variant_builds_and_scans(variant, rng):
    N = 1 if variant == 'griffin' else 4
    params = init_params(variant, N, 3, seed=2)
    coeffs = coefficients_from_params(params, rng.normal(size=(16, 3)))
    assert coeffs.a.shape == (16, 3, N)
    assert np.all(np.isfinite(scan_recurrent(coeffs).outputs))

# ============================================================================
# polarization
# ============================================================================

def test_apply_polarization_layout():
    a = apply_polarization(np.array([-1.0, -2.0]), BOTH)
    assert a.tolist() == [0.0, -1.0, -2.0, -1000.0]
    assert polarized_columns(4, BOTH).tolist() == [True, False, False, True]
    one = apply_polarization(np.array([-1.0]), PolarizationConfig(one_channel=True))
    assert one.tolist() == [0.0, -1.0]


def test_polarized_gates_are_exact(rng):
    params = init_params('mamba', 6, 2, seed=0, polarization=BOTH)
    coeffs = build_mamba(params, rng.normal(size=(20, 2)))
    assert np.all(coeffs.a[..., 0] == 1.0)
    assert np.allclose(coeffs.a[..., -1], np.exp(-1000.0 * coeffs.delta), rtol=1e-12, atol=0)
    frozen = params.frozen()['a_diag']
    assert frozen[:, 0].all() and frozen[:, -1].all() and not frozen[:, 1:-1].any()


def test_polarization_needs_a_free_channel():
    with pytest.raises(ParameterRangeError):
        init_params('s4', 2, 2, seed=0, polarization=BOTH)
    with pytest.raises(ParameterRangeError):
        init_params('la', 4, 2, seed=0, polarization=BOTH)


@pytest.mark.parametrize('variant', ('s4', 'mamba', 'gla', 'griffin'))
def test_params_file_preserves_tensors(variant, tmp_path):
    polarization = BOTH if variant in ('s4', 'mamba') else None
    N = 1 if variant == 'griffin' else 5
    params = init_params(variant, N, 2, seed=3, polarization=polarization)
    save_params(tmp_path / 'p.ssmc', params)
    loaded = load_params(tmp_path / 'p.ssmc')
    assert loaded.variant == variant
    for name, value in params.tensors().items():
        assert np.array_equal(loaded.tensors()[name], value)


def test_init_is_deterministic():
    first = init_params('mamba', 8, 4, seed=7).tensors()
    second = init_params('mamba', 8, 4, seed=7).tensors()
    assert all(np.array_equal(first[k], second[k]) for k in first)
