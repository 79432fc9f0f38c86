import numpy as np
import pytest

from ssmlab.core.config import ModelConfig
from ssmlab.core.errors import ShapeMismatchError
from ssmlab.core.grad import gradient_check
from ssmlab.core.model import (
    MixerStack, SSMLayer, TinyModel, forward_model, load_model, probe_coefficients,
    probe_states, run_model, save_model
)
from ssmlab.core.params import build_mamba, init_params
from ssmlab.core.scan import scan_recurrent

VOCAB = 16


def small_model(**overrides):
    cfg = ModelConfig(d_model=8, d_state=4, n_layers=2, **overrides)
    return TinyModel.init(cfg, VOCAB)


def test_logits_shape_and_causality(rng):
    model = small_model()
    tokens = rng.integers(0, VOCAB, size=(3, 12))
    logits = forward_model(model, tokens)
    assert logits.shape == (3, 12, VOCAB)
    changed = tokens.copy()
    changed[:, 8:] = (changed[:, 8:] + 1) % VOCAB
    assert np.allclose(forward_model(model, changed)[:, :8], logits[:, :8], rtol=0, atol=1e-12)
    assert np.allclose(forward_model(model, tokens[0]), logits[0], rtol=0, atol=1e-12)


def test_token_range_checked():
    model = small_model()
    with pytest.raises(ShapeMismatchError):
        forward_model(model, np.array([0, VOCAB]))
    with pytest.raises(ShapeMismatchError):
        forward_model(model, np.zeros((1, 2, 3), dtype=int))


def test_init_is_deterministic():
    first, second = small_model(seed=4), small_model(seed=4)
    assert all(np.array_equal(v, second.tensors()[k]) for k, v in first.tensors().items())
    other = small_model(seed=5)
    assert not np.array_equal(first.tensors()['embedding'], other.tensors()['embedding'])


def test_polarized_model_state_size():
    model = small_model(one_channel=True, zero_channel=True)
    assert model.mixers[0].N == 6
    frozen = model.frozen()['layers.1.mixer.a_diag']
    assert frozen[:, 0].all() and frozen[:, -1].all()


def test_checkpoint_restores_every_tensor(tmp_path, rng):
    model = small_model(variant='s4', one_channel=True)
    tensors = {k: v + 0.01 for k, v in model.tensors().items() if not k.endswith('a_diag')}
    model = model.with_tensors(tensors)
    save_model(tmp_path / 'm.ssmc', model)
    loaded = load_model(tmp_path / 'm.ssmc')
    assert loaded.config == model.config
    tokens = rng.integers(0, VOCAB, size=(2, 10))
    assert np.array_equal(forward_model(loaded, tokens), forward_model(model, tokens))


def test_model_gradients_match_finite_differences(rng):
    model = TinyModel.init(ModelConfig(d_model=4, d_state=2, n_layers=2), 8)
    tokens = rng.integers(0, 8, size=(2, 6))
    rows = gradient_check(model, tokens, rng.normal(size=(2, 6, 8)), max_entries=4)
    assert all(row['pass'] for row in rows), [r for r in rows if not r['pass']]


def test_layer_probe_reproduces_scan(rng):
    params = init_params('mamba', 4, 3, seed=0)
    x = rng.normal(size=(10, 3))
    probes = []
    y = run_model(SSMLayer(params), x, probes=probes)
    coeffs = probe_coefficients(probes[0])
    expected = build_mamba(params, x)
    assert np.array_equal(coeffs.a, expected.a)
    trajectory = scan_recurrent(coeffs)
    assert np.allclose(probe_states(probes[0]), trajectory.states[1:], rtol=0, atol=1e-12)
    assert np.allclose(y, trajectory.outputs, rtol=0, atol=1e-12)


def test_stack_residual(rng):
    layers = [init_params('s4', 4, 2, seed=i) for i in range(2)]
    x = rng.normal(size=(6, 2))
    plain = run_model(MixerStack(layers, residual=False), x)
    first = run_model(SSMLayer(layers[0]), x)
    assert np.allclose(plain, run_model(SSMLayer(layers[1]), first), rtol=0, atol=1e-14)
    probes = []
    run_model(MixerStack(layers), x, probes=probes)
    assert len(probes) == 2
    assert np.allclose(probes[0]['block'].value, x + first, rtol=0, atol=1e-14)


def test_stack_needs_matching_width():
    with pytest.raises(ShapeMismatchError):
        MixerStack([init_params('s4', 4, 2, seed=0), init_params('s4', 4, 3, seed=0)])
