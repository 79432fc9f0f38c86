"""
Models built from SSM mixers: a single layer, a plain stack, and the
token-level TinyModel used for associative recall.

A model exposes tensors() / with_tensors() / frozen() over a flat
name -> array mapping and forward_vars(tape, inputs, p, probes) which
records its computation on a tape. Running the same forward_vars on a
non-recording tape gives the untaped forward pass.
"""
import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ssmlab.core import autodiff as ad
from ssmlab.core.config import ModelConfig
from ssmlab.core.errors import ShapeMismatchError
from ssmlab.core.params import PolarizationConfig, init_params, params_to_container
from ssmlab.core.scan import StepCoefficients
from ssmlab.core.utils import KIND_PARAMS, Container, read_container, write_container

logger = logging.getLogger(__name__)

CONV_KERNEL = 4
RMS_EPS = 1e-6


def mixer_forward(params, p: Dict[str, ad.Var], x: ad.Var, prefix: str = '',
                  probe: Optional[Dict[str, Any]] = None) -> ad.Var:
    """
    Build coefficients on the tape and unroll the recurrence.

    Watches delta, a and the drive u = delta * b under `prefix` so their
    gradients can be read back.
    """
    tape = x.tape
    a, b, c, delta = params.coefficient_vars(p, x)
    u = ad.reshape(delta, delta.shape + (1,)) * b
    y, states = ad.run_scan(a, u, c)
    tape.watch(prefix + 'delta', delta)
    tape.watch(prefix + 'a', a)
    tape.watch(prefix + 'u', u)
    tape.watch(prefix + 'b', b)
    if probe is not None:
        probe.update({'a': a, 'b': b, 'c': c, 'delta': delta, 'states': states, 'mixer': y})
    return y


def _sub(p: Dict[str, Any], prefix: str) -> Dict[str, Any]:
    return {name[len(prefix):]: value for name, value in p.items() if name.startswith(prefix)}


def probe_coefficients(probe: Dict[str, Any], index: int = 0) -> StepCoefficients:
    """StepCoefficients of one sequence from a recorded probe."""
    def take(var):
        value = var.value
        return value[index] if value.ndim == 4 else value
    delta = probe['delta'].value
    delta = delta[index] if delta.ndim == 3 else delta
    return StepCoefficients(a=take(probe['a']), b=take(probe['b']), c=take(probe['c']), delta=delta)


def probe_states(probe: Dict[str, Any], index: int = 0) -> np.ndarray:
    """States h_1..h_T of one sequence, shape (T, D, N)."""
    states = np.stack([h.value for h in probe['states']], axis=-3)
    return states[index] if states.ndim == 4 else states


class SSMLayer:
    """One mixer applied to a real-valued (T, D) sequence."""

    def __init__(self, params):
        self.params = params

    @property
    def variant(self) -> str:
        return self.params.variant

    @property
    def D(self) -> int:
        return self.params.D

    def tensors(self) -> Dict[str, np.ndarray]:
        return self.params.tensors()

    def with_tensors(self, tensors: Dict[str, np.ndarray]) -> 'SSMLayer':
        return SSMLayer(self.params.with_tensors(tensors))

    def frozen(self) -> Dict[str, np.ndarray]:
        return self.params.frozen()

    def forward_vars(self, tape: ad.Tape, x: ad.Var, p: Dict[str, ad.Var],
                     probes: Optional[List[Dict[str, Any]]] = None) -> ad.Var:
        self.params.check_input(x.shape)
        probe = {} if probes is not None else None
        y = mixer_forward(self.params, p, x, probe=probe)
        if probes is not None:
            probe['block'] = y
            probes.append(probe)
        return y


class MixerStack:
    """Mixers applied in sequence, optionally with residual connections."""

    def __init__(self, layers: Sequence[Any], residual: bool = True):
        if not layers:
            raise ShapeMismatchError('A stack needs at least one layer', dimension='layers')
        D = layers[0].D
        if any(layer.D != D for layer in layers):
            raise ShapeMismatchError('All stacked layers must share D', dimension='D')
        self.layers = list(layers)
        self.residual = residual

    @property
    def variant(self) -> str:
        return self.layers[0].variant

    @property
    def D(self) -> int:
        return self.layers[0].D

    def tensors(self) -> Dict[str, np.ndarray]:
        flat = {}
        for i, params in enumerate(self.layers):
            for name, value in params.tensors().items():
                flat[f'layers.{i}.{name}'] = value
        return flat

    def with_tensors(self, tensors: Dict[str, np.ndarray]) -> 'MixerStack':
        layers = [params.with_tensors(_sub(tensors, f'layers.{i}.')) for i, params in enumerate(self.layers)]
        return MixerStack(layers, residual=self.residual)

    def frozen(self) -> Dict[str, np.ndarray]:
        flat = {}
        for i, params in enumerate(self.layers):
            for name, mask in params.frozen().items():
                flat[f'layers.{i}.{name}'] = mask
        return flat

    def forward_vars(self, tape: ad.Tape, x: ad.Var, p: Dict[str, ad.Var],
                     probes: Optional[List[Dict[str, Any]]] = None) -> ad.Var:
        self.layers[0].check_input(x.shape)
        h = x
        for i, params in enumerate(self.layers):
            prefix = f'layers.{i}.'
            probe = {} if probes is not None else None
            y = mixer_forward(params, _sub(p, prefix), h, prefix=prefix, probe=probe)
            h = h + y if self.residual else y
            if probes is not None:
                probe['block'] = h
                probes.append(probe)
        return h


def rms_norm(x: ad.Var, scale: ad.Var) -> ad.Var:
    rms = ad.sqrt(ad.reduce_mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / rms * scale


class TinyModel:
    """
    Token embedding, L gated SSM blocks and a bias-free classifier.

    Block: x_hat = RMSNorm(x); m = mixer(conv(x_hat)); x += W_o (m * sigmoid(W_g x_hat))
    """

    def __init__(self, config: ModelConfig, vocab_size: int,
                 tensors: Dict[str, np.ndarray], mixers: List[Any]):
        self.config = config
        self.vocab_size = vocab_size
        self._tensors = dict(tensors)
        self.mixers = list(mixers)

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def D(self) -> int:
        return self.config.d_model

    @property
    def polarization(self) -> PolarizationConfig:
        return PolarizationConfig(one_channel=self.config.one_channel,
                                  zero_channel=self.config.zero_channel,
                                  zero_value=self.config.zero_value)

    @classmethod
    def init(cls, config: ModelConfig, vocab_size: int) -> 'TinyModel':
        """Initialize deterministically from config.seed."""
        D = config.d_model
        polarization = PolarizationConfig(one_channel=config.one_channel,
                                          zero_channel=config.zero_channel,
                                          zero_value=config.zero_value)
        N = 1 if config.variant == 'griffin' else config.d_state + polarization.extra
        seeds = np.random.SeedSequence(config.seed).spawn(config.n_layers + 1)
        rng = np.random.default_rng(seeds[0])
        scale = 1.0 / np.sqrt(D)
        tensors = {'embedding': rng.normal(0.0, 1.0, size=(vocab_size, D))}
        mixers = []
        for i in range(config.n_layers):
            prefix = f'layers.{i}.'
            tensors[prefix + 'norm'] = np.ones(D)
            if config.conv:
                tensors[prefix + 'conv_w'] = rng.normal(0.0, 1.0 / np.sqrt(CONV_KERNEL), size=(CONV_KERNEL, D))
                tensors[prefix + 'conv_b'] = np.zeros(D)
            tensors[prefix + 'w_g'] = rng.normal(0.0, scale, size=(D, D))
            tensors[prefix + 'w_o'] = rng.normal(0.0, scale, size=(D, D))
            layer_seed = int(seeds[i + 1].generate_state(1)[0])
            mixers.append(init_params(config.variant, N, D, layer_seed,
                                      polarization=polarization if polarization.enabled else None,
                                      xi=config.xi))
        tensors['norm_f'] = np.ones(D)
        tensors['classifier'] = rng.normal(0.0, scale, size=(vocab_size, D))
        return cls(config, vocab_size, tensors, mixers)

    def tensors(self) -> Dict[str, np.ndarray]:
        flat = dict(self._tensors)
        for i, params in enumerate(self.mixers):
            for name, value in params.tensors().items():
                flat[f'layers.{i}.mixer.{name}'] = value
        return flat

    def with_tensors(self, tensors: Dict[str, np.ndarray]) -> 'TinyModel':
        own = {k: tensors.get(k, v) for k, v in self._tensors.items()}
        mixers = []
        for i, params in enumerate(self.mixers):
            update = _sub(tensors, f'layers.{i}.mixer.')
            mixers.append(params.with_tensors(update) if update else params)
        return TinyModel(self.config, self.vocab_size, own, mixers)

    def frozen(self) -> Dict[str, np.ndarray]:
        flat = {name: np.zeros(value.shape, dtype=bool) for name, value in self._tensors.items()}
        for i, params in enumerate(self.mixers):
            for name, mask in params.frozen().items():
                flat[f'layers.{i}.mixer.{name}'] = mask
        return flat

    def project(self) -> 'TinyModel':
        return TinyModel(self.config, self.vocab_size, self._tensors,
                         [params.project() for params in self.mixers])

    def check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim not in (1, 2):
            raise ShapeMismatchError(f'Tokens must be (L,) or (B, L), got {tokens.shape}', dimension='tokens')
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ShapeMismatchError(f'Token ids must lie in [0, {self.vocab_size})', dimension='tokens')
        return tokens.astype(np.int64)

    def forward_vars(self, tape: ad.Tape, tokens: np.ndarray, p: Dict[str, ad.Var],
                     probes: Optional[List[Dict[str, Any]]] = None) -> ad.Var:
        tokens = self.check_tokens(tokens)
        x = tape.watch('inputs', ad.take(p['embedding'], tokens))
        for i, params in enumerate(self.mixers):
            prefix = f'layers.{i}.'
            x_hat = rms_norm(x, p[prefix + 'norm'])
            m_in = x_hat
            if self.config.conv:
                m_in = ad.causal_conv(x_hat, p[prefix + 'conv_w'], p[prefix + 'conv_b'])
            probe = {} if probes is not None else None
            y = mixer_forward(params, _sub(p, prefix + 'mixer.'), m_in, prefix=prefix, probe=probe)
            gated = y * ad.sigmoid(ad.linear(x_hat, p[prefix + 'w_g']))
            x = x + ad.linear(gated, p[prefix + 'w_o'])
            if probes is not None:
                probe['block'] = x
                probes.append(probe)
        return ad.linear(rms_norm(x, p['norm_f']), p['classifier'])


def attach(tape: ad.Tape, model) -> Dict[str, ad.Var]:
    """Register every model tensor as a named leaf."""
    return {name: tape.leaf(value, name) for name, value in model.tensors().items()}


def run_model(model, inputs: np.ndarray, probes: Optional[List[Dict[str, Any]]] = None) -> np.ndarray:
    """Untaped forward pass."""
    tape = ad.Tape(record=False)
    p = attach(tape, model)
    x = inputs if isinstance(model, TinyModel) else tape.leaf(np.asarray(inputs, dtype=np.float64), 'x')
    return model.forward_vars(tape, x, p, probes=probes).value


def forward_model(model: TinyModel, batch: np.ndarray) -> np.ndarray:
    """Causal logits (B, L, V) or (L, V) for token ids."""
    return run_model(model, batch)


def save_model(path, model: TinyModel) -> str:
    """Checkpoint: every tensor plus the model config, in the params container."""
    arrays = {name: np.asarray(value) for name, value in model.tensors().items()}
    meta = {'model': model.config.to_dict(), 'vocab_size': model.vocab_size,
            'mixer': params_to_container(model.mixers[0]).meta}
    container = Container(kind=KIND_PARAMS, tag=0, N=model.mixers[0].N, D=model.D,
                          meta=meta, arrays=arrays)
    return write_container(path, container)


def load_model(path) -> TinyModel:
    container = read_container(path, expected_kind=KIND_PARAMS)
    if 'model' not in container.meta:
        raise ShapeMismatchError(f'{path} holds mixer parameters, not a model checkpoint', dimension='kind')
    config = ModelConfig.from_dict(container.meta['model'])
    model = TinyModel.init(config, container.meta['vocab_size'])
    return model.with_tensors(container.arrays)
