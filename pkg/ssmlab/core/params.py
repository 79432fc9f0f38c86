"""
Parameterizations: map learnable weights and an input sequence to StepCoefficients.

Every parameter family exposes the same small surface:
  tensors()          name -> array of every learnable tensor
  with_tensors(d)    copy with some tensors replaced
  frozen()           name -> bool mask of entries excluded from updates
  coefficient_vars   tape-level construction of (a, b, c, delta)
so the same code builds coefficients, records them for gradients and
updates them during training.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, ClassVar, Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from ssmlab.core import autodiff as ad
from ssmlab.core.errors import ParameterRangeError, ShapeMismatchError
from ssmlab.core.scan import StepCoefficients
from ssmlab.core.utils import KIND_PARAMS, Container, read_container, write_container

logger = logging.getLogger(__name__)

LAM_VARIANTS = ('la', 'retnet', 'gla', 'rwkv', 'griffin')
VARIANT_TAGS = {'s4': 1, 'mamba': 2, 'la': 3, 'retnet': 4, 'gla': 5, 'rwkv': 6, 'griffin': 7}

DELTA_INIT_RANGE = (1e-3, 1e-1)
GRIFFIN_XI = 8.0


@dataclass(frozen=True)
class PolarizationConfig:
    """Prepend a gate-1 state channel and/or append a gate-0 state channel."""
    one_channel: bool = False
    zero_channel: bool = False
    zero_value: float = -1000.0

    @property
    def extra(self) -> int:
        return int(self.one_channel) + int(self.zero_channel)

    @property
    def enabled(self) -> bool:
        return self.extra > 0

    def to_dict(self) -> Dict[str, Any]:
        return {'one_channel': self.one_channel, 'zero_channel': self.zero_channel,
                'zero_value': self.zero_value}


def apply_polarization(pre_exp_a: np.ndarray, config: PolarizationConfig) -> np.ndarray:
    """
    Return [0, A, zero_value] along the last axis (or the one-sided variants).

    After exp(delta * .) the first entry is exactly 1 and the last is
    exp(zero_value * delta).
    """
    a = np.asarray(pre_exp_a)
    parts = []
    lead = a.shape[:-1]
    if config.one_channel:
        parts.append(np.zeros(lead + (1,), dtype=a.dtype))
    parts.append(a)
    if config.zero_channel:
        parts.append(np.full(lead + (1,), config.zero_value, dtype=a.dtype))
    return np.concatenate(parts, axis=-1)


def polarized_columns(N: int, config: PolarizationConfig) -> np.ndarray:
    """Boolean mask over the N state columns marking polarized ones."""
    mask = np.zeros(N, dtype=bool)
    if config.one_channel:
        mask[0] = True
    if config.zero_channel:
        mask[-1] = True
    return mask


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


def _check_pre_exp(a_diag: np.ndarray, polarization: PolarizationConfig) -> None:
    free = ~polarized_columns(a_diag.shape[-1], polarization)
    if free.sum() == 0:
        raise ParameterRangeError('No free state channel left after polarization')
    if np.any(np.real(a_diag[..., free]) >= 0):
        raise ParameterRangeError('Pre-exponential A entries must have strictly negative real part')
    if polarization.one_channel and np.any(a_diag[..., 0] != 0):
        raise ParameterRangeError('One-polarized column must be exactly 0')
    if polarization.zero_channel and np.any(a_diag[..., -1] != polarization.zero_value):
        raise ParameterRangeError(f'Zero-polarized column must be exactly {polarization.zero_value}')


def _expand(var: ad.Var) -> ad.Var:
    # (..., T, D) -> (..., T, D, 1)
    return ad.reshape(var, var.shape + (1,))


class _Params:
    """Shared tensor plumbing for the parameter families."""
    variant: ClassVar[str] = ''
    TENSORS: ClassVar[Tuple[str, ...]] = ()

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSORS}

    def with_tensors(self, tensors: Dict[str, np.ndarray]):
        return replace(self, **tensors)

    def frozen(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros(np.shape(value), dtype=bool) for name, value in self.tensors().items()}

    def project(self):
        """Map back onto the admissible set after an optimizer step."""
        return self

    def check_input(self, x_shape: Tuple[int, ...]) -> None:
        if len(x_shape) < 2:
            raise ShapeMismatchError(f'Input must be (T, D), got shape {x_shape}', dimension='x')
        if x_shape[-1] != self.D:
            raise ShapeMismatchError(
                f'Input has {x_shape[-1]} channels, parameters expect D={self.D}', dimension='D'
            )

    def meta(self) -> Dict[str, Any]:
        return {'variant': self.variant}


@dataclass(frozen=True)
class S4Params(_Params):
    """
    Time-invariant diagonal SSM. a_diag is pre-exponential (continuous mode),
    shape (D, N) or (N,) shared across channels; delta is a scalar or (D,).
    """
    a_diag: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta: np.ndarray
    polarization: PolarizationConfig = field(default_factory=PolarizationConfig)

    variant: ClassVar[str] = 's4'
    TENSORS: ClassVar[Tuple[str, ...]] = ('a_diag', 'b', 'c', 'delta')

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_diag))
        b = np.atleast_2d(np.asarray(self.b))
        c = np.atleast_2d(np.asarray(self.c))
        D = max(a.shape[0], b.shape[0], c.shape[0], np.size(self.delta))
        N = a.shape[-1]
        try:
            a, b, c = (np.array(np.broadcast_to(v, (D, N))) for v in (a, b, c))
            delta = np.array(np.broadcast_to(np.asarray(self.delta, dtype=np.float64), (D,)))
        except ValueError:
            raise ShapeMismatchError(
                f'S4 shapes disagree: a_diag {np.shape(self.a_diag)}, b {np.shape(self.b)}, '
                f'c {np.shape(self.c)}, delta {np.shape(self.delta)}', dimension='N'
            )
        _check_pre_exp(a, self.polarization)
        if np.any(delta <= 0) or np.any(delta > 1):
            raise ParameterRangeError(f'S4 delta must lie in (0, 1], got {delta}')
        object.__setattr__(self, 'a_diag', a)
        object.__setattr__(self, 'b', b)
        object.__setattr__(self, 'c', c)
        object.__setattr__(self, 'delta', delta)

    @property
    def D(self) -> int:
        return self.a_diag.shape[0]

    @property
    def N(self) -> int:
        return self.a_diag.shape[1]

    def frozen(self) -> Dict[str, np.ndarray]:
        masks = super().frozen()
        masks['a_diag'] = np.broadcast_to(polarized_columns(self.N, self.polarization),
                                          self.a_diag.shape).copy()
        return masks

    def project(self) -> 'S4Params':
        return replace(self, delta=np.clip(self.delta, 1e-4, 1.0))

    def coefficient_vars(self, p: Dict[str, ad.Var], x: ad.Var):
        lead = x.shape
        full = lead + (self.N,)
        delta = ad.broadcast_to(p['delta'], lead)
        a = ad.broadcast_to(ad.exp(ad.reshape(p['delta'], (self.D, 1)) * p['a_diag']), full)
        b = p['b'] * _expand(x)
        c = ad.broadcast_to(p['c'], full)
        return a, b, c, delta

    def meta(self) -> Dict[str, Any]:
        return {'variant': self.variant, 'polarization': self.polarization.to_dict()}


@dataclass(frozen=True)
class MambaParams(_Params):
    """
    Selective SSM: delta = softplus(W_delta x + b_delta) per channel,
    a = exp(delta * A), b = (W_B x) * x[d], c = W_C x shared across channels.
    """
    a_diag: np.ndarray
    w_delta: np.ndarray
    b_delta: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray
    polarization: PolarizationConfig = field(default_factory=PolarizationConfig)

    variant: ClassVar[str] = 'mamba'
    TENSORS: ClassVar[Tuple[str, ...]] = ('a_diag', 'w_delta', 'b_delta', 'w_b', 'w_c')

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_diag, dtype=np.float64))
        w_delta = np.atleast_2d(np.asarray(self.w_delta, dtype=np.float64))
        b_delta = np.atleast_1d(np.asarray(self.b_delta, dtype=np.float64))
        w_b = np.atleast_2d(np.asarray(self.w_b, dtype=np.float64))
        w_c = np.atleast_2d(np.asarray(self.w_c, dtype=np.float64))
        D, N = a.shape
        checks = (('w_delta', w_delta.shape, (D, D)), ('b_delta', b_delta.shape, (D,)),
                  ('w_b', w_b.shape, (N, D)), ('w_c', w_c.shape, (N, D)))
        for name, got, want in checks:
            if got != want:
                raise ShapeMismatchError(f'{name} has shape {got}, expected {want}', dimension=name)
        _check_pre_exp(a, self.polarization)
        for name, value in (('a_diag', a), ('w_delta', w_delta), ('b_delta', b_delta),
                            ('w_b', w_b), ('w_c', w_c)):
            object.__setattr__(self, name, value)

    @property
    def D(self) -> int:
        return self.a_diag.shape[0]

    @property
    def N(self) -> int:
        return self.a_diag.shape[1]

    def frozen(self) -> Dict[str, np.ndarray]:
        masks = super().frozen()
        masks['a_diag'] = np.broadcast_to(polarized_columns(self.N, self.polarization),
                                          self.a_diag.shape).copy()
        return masks

    def coefficient_vars(self, p: Dict[str, ad.Var], x: ad.Var):
        N = self.N
        delta = ad.softplus(ad.linear(x, p['w_delta']) + p['b_delta'])
        a = ad.exp(_expand(delta) * p['a_diag'])
        bx = ad.linear(x, p['w_b'])
        b = ad.reshape(bx, bx.shape[:-1] + (1, N)) * _expand(x)
        cx = ad.linear(x, p['w_c'])
        c = ad.broadcast_to(ad.reshape(cx, cx.shape[:-1] + (1, N)), a.shape)
        return a, b, c, delta

    def meta(self) -> Dict[str, Any]:
        return {'variant': self.variant, 'polarization': self.polarization.to_dict()}


def _infer_dim(variant: str, weights: Dict[str, np.ndarray], which: str) -> int:
    for name, dims in LAM_WEIGHTS[variant].items():
        if which in dims and name in weights:
            return weights[name].shape[dims.index(which)]
    raise ShapeMismatchError(f'Cannot infer {which} from {variant} weights', dimension=which)


# weights each linear-attention-style variant needs, with their shapes in (N, D)
# gla keeps separate key and query maps per channel: (D, N, D)
LAM_WEIGHTS = {
    'la': {'w_k': 'ND', 'w_q': 'ND', 'w_v': 'DD', 'b_v': 'D'},
    'retnet': {'w_k': 'ND', 'w_q': 'ND', 'w_v': 'DD', 'b_v': 'D', 'gamma_logit': ''},
    'gla': {'w_k': 'DND', 'w_q': 'DND', 'w_v': 'DD', 'b_v': 'D', 'w_alpha': 'ND', 'b_alpha': 'N'},
    'rwkv': {'w': 'D', 'w_k': 'DD', 'w_v': 'ND', 'w_q': 'ND'},
    'griffin': {'gamma': 'D', 'w_a': 'DD', 'b_a': 'D', 'w_x': 'DD', 'b_x': 'D'},
}


@dataclass(frozen=True)
class LAMParams(_Params):
    """
    Linear-attention family written as the unified recurrence.

    la:      a = 1,      b = W_k x, c = W_q x, delta_d = softplus(W_v[d] x + b_v[d])
    retnet:  a = gamma,  as la, gamma = sigmoid(gamma_logit)
    gla:     a = sigmoid(W_alpha x + b_alpha) shared over channels,
             b_d = W_k[d] x, c_d = W_q[d] x per channel, delta as la
    rwkv:    a = sigmoid(-w - k_d), delta = sigmoid(w + k_d), k_d = W_k[d] x,
             b = W_v x, c = W_q x
    griffin: log a = -xi softplus(gamma) sigmoid(W_a x + b_a), delta = sqrt(1 - a^2),
             b = sigmoid(W_x x + b_x) * x, c = 1, one state per channel
    """
    lam_variant: str
    weights: Dict[str, np.ndarray]
    xi: float = GRIFFIN_XI

    def __post_init__(self):
        if self.lam_variant not in LAM_WEIGHTS:
            raise ParameterRangeError(f"Unknown variant '{self.lam_variant}', expected one of {LAM_VARIANTS}")
        layout = LAM_WEIGHTS[self.lam_variant]
        weights = {k: np.asarray(v, dtype=np.float64) for k, v in self.weights.items()}
        missing = set(layout) - set(weights)
        unknown = set(weights) - set(layout)
        if missing or unknown:
            raise ShapeMismatchError(
                f'{self.lam_variant}: missing weights {sorted(missing)}, unexpected {sorted(unknown)}',
                dimension=(sorted(missing) or sorted(unknown))[0]
            )
        D = _infer_dim(self.lam_variant, weights, 'D')
        N = 1 if self.lam_variant == 'griffin' else _infer_dim(self.lam_variant, weights, 'N')
        for name, dims in layout.items():
            want = tuple({'N': N, 'D': D}[ch] for ch in dims)
            if weights[name].shape != want:
                raise ShapeMismatchError(f'{name} has shape {weights[name].shape}, expected {want}',
                                         dimension=name)
        if self.lam_variant == 'rwkv' and np.any(weights['w'] < 0):
            raise ParameterRangeError('RWKV decay w must be non-negative')
        object.__setattr__(self, 'weights', weights)

    @property
    def variant(self) -> str:
        return self.lam_variant

    @property
    def D(self) -> int:
        return _infer_dim(self.lam_variant, self.weights, 'D')

    @property
    def N(self) -> int:
        return 1 if self.lam_variant == 'griffin' else _infer_dim(self.lam_variant, self.weights, 'N')

    @property
    def gamma(self) -> float:
        """RetNet decay."""
        return float(expit(self.weights['gamma_logit']))

    def tensors(self) -> Dict[str, np.ndarray]:
        return dict(self.weights)

    def with_tensors(self, tensors: Dict[str, np.ndarray]) -> 'LAMParams':
        weights = dict(self.weights)
        weights.update(tensors)
        return replace(self, weights=weights)

    def project(self) -> 'LAMParams':
        if self.lam_variant == 'rwkv':
            return self.with_tensors({'w': np.maximum(self.weights['w'], 0.0)})
        return self

    def coefficient_vars(self, p: Dict[str, ad.Var], x: ad.Var):
        v = self.lam_variant
        lead = x.shape
        N = self.N
        full = lead + (N,)

        def shared(var):
            # (..., T, N) -> (..., T, D, N)
            return ad.broadcast_to(ad.reshape(var, var.shape[:-1] + (1, N)), full)

        def per_channel(w):
            # (D, N, D_in) weights -> (..., T, D, N)
            flat = ad.reshape(w, (w.shape[0] * N, w.shape[2]))
            return ad.reshape(ad.linear(x, flat), full)

        if v in ('la', 'retnet', 'gla'):
            if v == 'gla':
                b, c = per_channel(p['w_k']), per_channel(p['w_q'])
            else:
                b = shared(ad.linear(x, p['w_k']))
                c = shared(ad.linear(x, p['w_q']))
            delta = ad.softplus(ad.linear(x, p['w_v']) + p['b_v'])
            if v == 'la':
                a = x.tape.constant(np.ones(full))
            elif v == 'retnet':
                a = ad.broadcast_to(ad.sigmoid(p['gamma_logit']), full)
            else:
                a = shared(ad.sigmoid(ad.linear(x, p['w_alpha']) + p['b_alpha']))
            return a, b, c, delta

        if v == 'rwkv':
            logit = ad.linear(x, p['w_k']) + p['w']
            a = ad.broadcast_to(_expand(ad.sigmoid(-logit)), full)
            delta = ad.sigmoid(logit)
            b = shared(ad.linear(x, p['w_v']))
            c = shared(ad.linear(x, p['w_q']))
            return a, b, c, delta

        gate = ad.sigmoid(ad.linear(x, p['w_a']) + p['b_a'])
        log_a = (-self.xi) * ad.softplus(p['gamma']) * gate
        a_td = ad.exp(log_a)
        delta = ad.sqrt(1.0 - a_td * a_td)
        b = _expand(ad.sigmoid(ad.linear(x, p['w_x']) + p['b_x']) * x)
        c = x.tape.constant(np.ones(full))
        return _expand(a_td), b, c, delta

    def meta(self) -> Dict[str, Any]:
        return {'variant': self.lam_variant, 'xi': self.xi}


def coefficients_from_params(params, x: np.ndarray) -> StepCoefficients:
    """Run a parameter family's construction on an untaped forward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(f'Input must be (T, D), got shape {x.shape}', dimension='x')
    params.check_input(x.shape)
    tape = ad.Tape(record=False)
    leaves = {name: tape.leaf(value, name) for name, value in params.tensors().items()}
    a, b, c, delta = params.coefficient_vars(leaves, tape.leaf(x, 'x'))
    return StepCoefficients(a=a.value, b=b.value, c=c.value, delta=delta.value)


def build_s4(params: S4Params, x: np.ndarray) -> StepCoefficients:
    """a_t = exp(delta * A) constant over t, b_t = b * x_t, c_t = c, delta_t = delta."""
    return coefficients_from_params(params, x)


def build_mamba(params: MambaParams, x: np.ndarray) -> StepCoefficients:
    """Input-dependent (selective) coefficients."""
    return coefficients_from_params(params, x)


def build_lam(params: LAMParams, x: np.ndarray) -> StepCoefficients:
    """Coefficients of the la / retnet / gla / rwkv / griffin reformulations."""
    return coefficients_from_params(params, x)


def _delta_bias(rng: np.random.Generator, size: int) -> np.ndarray:
    lo, hi = DELTA_INIT_RANGE
    delta0 = np.exp(rng.uniform(np.log(lo), np.log(hi), size=size))
    return inverse_softplus(delta0)


def init_params(variant: str, N: int, D: int, seed: int,
                polarization: Optional[PolarizationConfig] = None, xi: float = GRIFFIN_XI):
    """
    Initialize parameters deterministically from `seed`.

    N is the total state size, polarized channels included. Free
    pre-exponential entries are -(n+1); weights are N(0, 1/sqrt(D)); the
    delta bias puts the initial step size (zero input) in [1e-3, 1e-1].
    """
    polarization = polarization or PolarizationConfig()
    if N < 1 or D < 1:
        raise ParameterRangeError(f'N and D must be positive, got N={N}, D={D}')
    free = N - polarization.extra
    if free < 1:
        raise ParameterRangeError(
            f'N={N} leaves no free state channel with {polarization.extra} polarized channel(s)'
        )
    if polarization.enabled and variant not in ('s4', 'mamba'):
        raise ParameterRangeError(f'Polarization applies to s4 and mamba only, not {variant}')
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(D)

    def normal(*shape):
        return rng.normal(0.0, scale, size=shape)

    a_free = -np.tile(np.arange(1, free + 1, dtype=np.float64), (D, 1))
    if variant == 's4':
        a_diag = apply_polarization(a_free, polarization)
        lo, hi = DELTA_INIT_RANGE
        delta = np.exp(rng.uniform(np.log(lo), np.log(hi), size=D))
        return S4Params(a_diag=a_diag, b=normal(D, N), c=normal(D, N), delta=delta,
                        polarization=polarization)
    if variant == 'mamba':
        return MambaParams(a_diag=apply_polarization(a_free, polarization),
                           w_delta=normal(D, D), b_delta=_delta_bias(rng, D),
                           w_b=normal(N, D), w_c=normal(N, D), polarization=polarization)
    if variant in ('la', 'retnet', 'gla'):
        kq = (D, N, D) if variant == 'gla' else (N, D)
        weights = {'w_k': normal(*kq), 'w_q': normal(*kq), 'w_v': normal(D, D),
                   'b_v': _delta_bias(rng, D)}
        if variant == 'retnet':
            weights['gamma_logit'] = np.array(np.log(0.9 / 0.1))
        if variant == 'gla':
            weights['w_alpha'] = normal(N, D)
            weights['b_alpha'] = np.full(N, np.log(0.9 / 0.1))
        return LAMParams(lam_variant=variant, weights=weights)
    if variant == 'rwkv':
        return LAMParams(lam_variant='rwkv', weights={
            'w': rng.uniform(0.1, 1.0, size=D), 'w_k': normal(D, D),
            'w_v': normal(N, D), 'w_q': normal(N, D)})
    if variant == 'griffin':
        # recurrence gate at zero input: a0 in [0.9, 0.999]
        a0 = rng.uniform(0.9, 0.999, size=D)
        gamma = inverse_softplus(-np.log(a0) / (0.5 * xi))
        return LAMParams(lam_variant='griffin', xi=xi, weights={
            'gamma': gamma, 'w_a': normal(D, D), 'b_a': np.zeros(D),
            'w_x': normal(D, D), 'b_x': np.zeros(D)})
    raise ParameterRangeError(f"Unknown variant '{variant}'")


def params_to_container(params) -> Container:
    arrays = {name: np.asarray(value) for name, value in params.tensors().items()}
    return Container(kind=KIND_PARAMS, tag=VARIANT_TAGS[params.variant], N=params.N,
                     D=params.D, meta=params.meta(), arrays=arrays)


def params_from_container(container: Container):
    meta = container.meta
    variant = meta.get('variant')
    arrays = container.arrays
    if variant in ('s4', 'mamba'):
        polarization = PolarizationConfig(**meta.get('polarization', {}))
        cls = S4Params if variant == 's4' else MambaParams
        return cls(polarization=polarization, **arrays)
    if variant in LAM_VARIANTS:
        return LAMParams(lam_variant=variant, weights=arrays, xi=meta.get('xi', GRIFFIN_XI))
    raise ParameterRangeError(f"Unknown variant tag in container: {variant!r}")


def save_params(path: Union[str, Path], params) -> str:
    return write_container(path, params_to_container(params))


def load_params(path: Union[str, Path]):
    return params_from_container(read_container(path, expected_kind=KIND_PARAMS))
