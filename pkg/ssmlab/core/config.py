"""
Experiment configuration: typed sections, JSON loading, and environment defaults.
"""
import os
import json
import logging
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from ssmlab.core.errors import ConfigError

logger = logging.getLogger(__name__)

VARIANTS = ('s4', 'mamba', 'la', 'retnet', 'gla', 'rwkv', 'griffin')


def _check_value(value: Any, default: Any, path: str) -> Any:
    """Type-check a config value against the type of its field default."""
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f'{path}: expected true/false, got {value!r}', field=path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'{path}: expected an integer, got {value!r}', field=path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'{path}: expected a number, got {value!r}', field=path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f'{path}: expected a string, got {value!r}', field=path)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f'{path}: expected a list, got {value!r}', field=path)
        if default:
            return [_check_value(v, default[0], f'{path}[{i}]') for i, v in enumerate(value)]
        return list(value)
    return value


class _Section:
    """from_dict / to_dict shared by every config dataclass."""

    # nested dataclass fields: name -> class; list-of-dataclass fields likewise
    _nested: Dict[str, type] = {}
    _nested_lists: Dict[str, type] = {}

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], path: str = ''):
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError(f'{path or "<root>"}: expected an object, got {type(data).__name__}',
                              field=path or None)
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        defaults = cls()
        for key, value in data.items():
            key_path = f'{path}.{key}' if path else key
            if key not in known:
                raise ConfigError(f'Unknown config field: {key_path}', field=key_path)
            if key in cls._nested:
                kwargs[key] = cls._nested[key].from_dict(value, key_path)
            elif key in cls._nested_lists:
                if not isinstance(value, list):
                    raise ConfigError(f'{key_path}: expected a list', field=key_path)
                item_cls = cls._nested_lists[key]
                kwargs[key] = [item_cls.from_dict(v, f'{key_path}[{i}]') for i, v in enumerate(value)]
            else:
                kwargs[key] = _check_value(value, getattr(defaults, key), key_path)
        section = cls(**kwargs)
        section.validate(path)
        return section

    def validate(self, path: str = '') -> None:
        pass

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _fail(path: str, name: str, message: str) -> None:
    key_path = f'{path}.{name}' if path else name
    raise ConfigError(f'{key_path}: {message}', field=key_path)


@dataclass
class ARConfig(_Section):
    """Associative-recall dataset settings."""
    vocab_size: int = 64
    lengths: List[int] = field(default_factory=lambda: [64, 128])
    kv_fractions: List[float] = field(default_factory=lambda: [0.125, 0.25, 0.5])
    examples_per_cell: int = 3334
    power_alpha: float = 1.0
    eval_length: int = 128
    eval_kv_pairs: List[int] = field(default_factory=lambda: [8, 16, 32])
    eval_examples: int = 500
    seed: int = 0

    def validate(self, path: str = '') -> None:
        if self.vocab_size < 4 or self.vocab_size % 2:
            _fail(path, 'vocab_size', f'must be even and at least 4, got {self.vocab_size}')
        if not self.lengths or any(L < 4 for L in self.lengths):
            _fail(path, 'lengths', 'need at least one length >= 4')
        if not self.kv_fractions or any(not 0 < f < 1 for f in self.kv_fractions):
            _fail(path, 'kv_fractions', 'fractions must lie in (0, 1)')
        if self.examples_per_cell < 1:
            _fail(path, 'examples_per_cell', 'must be positive')
        if self.power_alpha < 0:
            _fail(path, 'power_alpha', 'must be non-negative')
        if any(k < 1 for k in self.eval_kv_pairs):
            _fail(path, 'eval_kv_pairs', 'pair counts must be positive')


@dataclass
class ModelConfig(_Section):
    """One TinyModel row: mixer variant, sizes, polarization."""
    name: str = 'default'
    variant: str = 'mamba'
    d_model: int = 64
    d_state: int = 16
    n_layers: int = 2
    conv: bool = True
    one_channel: bool = False
    zero_channel: bool = False
    zero_value: float = -1000.0
    xi: float = 8.0
    seed: int = 0

    def validate(self, path: str = '') -> None:
        if self.variant not in VARIANTS:
            _fail(path, 'variant', f"unknown variant '{self.variant}', expected one of {VARIANTS}")
        for name in ('d_model', 'd_state', 'n_layers'):
            if getattr(self, name) < 1:
                _fail(path, name, 'must be positive')
        if (self.one_channel or self.zero_channel) and self.variant not in ('s4', 'mamba'):
            _fail(path, 'variant', 'polarization applies to s4 and mamba mixers only')
        if self.zero_value >= 0:
            _fail(path, 'zero_value', 'must be negative')


@dataclass
class TrainConfig(_Section):
    """Optimizer and loop settings."""
    batch_size: int = 128
    micro_batch: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    grad_clip: float = 1.0
    seed: int = 0

    def validate(self, path: str = '') -> None:
        if self.batch_size < 1 or self.micro_batch < 1:
            _fail(path, 'batch_size', 'batch sizes must be positive')
        if self.learning_rate < 0:
            _fail(path, 'learning_rate', 'must be non-negative')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            _fail(path, 'beta1', 'moment decays must lie in [0, 1)')
        if self.epochs < 0:
            _fail(path, 'epochs', 'must be non-negative')


@dataclass
class CheckConfig(_Section):
    """Sizes of the theorem suite sweeps."""
    parallel_instances: int = 1000
    gradient_instances: int = 200
    bound_instances: int = 1000
    lowpass_instances: int = 100
    polarization_instances: int = 100
    polarization_steps: int = 100
    envelope_length: int = 256
    envelope_models: int = 3
    seed: int = 0


@dataclass
class AnalysisConfig(_Section):
    """Settings for the analyze / probe subcommands."""
    variant: str = 'mamba'
    seq_len: int = 64
    d_model: int = 4
    d_state: int = 8
    n_layers: int = 8
    n_inputs: int = 16
    output_channel: int = 0
    aggregate: str = 'max'
    lag_window: List[int] = field(default_factory=lambda: [0, 32])
    epsilons: List[float] = field(default_factory=lambda: [0.1, 0.01])
    omega_min: float = 1e-2
    omega_max: float = 1e4
    omega_points: int = 256
    region: str = 'trailing'
    probe_length: int = 8
    checkpoint: Optional[str] = None
    dataset: Optional[str] = None
    seed: int = 0

    def validate(self, path: str = '') -> None:
        if self.variant not in VARIANTS:
            _fail(path, 'variant', f"unknown variant '{self.variant}'")
        if self.aggregate not in ('max', 'norm'):
            _fail(path, 'aggregate', "expected 'max' or 'norm'")
        if self.region not in ('leading', 'trailing'):
            _fail(path, 'region', "expected 'leading' or 'trailing'")
        if len(self.lag_window) != 2 or self.lag_window[0] >= self.lag_window[1]:
            _fail(path, 'lag_window', 'expected [first_lag, last_lag] with first < last')
        if any(e <= 0 for e in self.epsilons):
            _fail(path, 'epsilons', 'must be positive')


@dataclass
class RunConfig(_Section):
    """Fully resolved configuration of one CLI invocation."""
    subcommand: str = ''
    config_path: Optional[str] = None
    output_dir: str = 'output'
    seed: Optional[int] = None
    verbosity: int = 0
    workers: int = 1
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    ar: ARConfig = field(default_factory=ARConfig)
    models: List[ModelConfig] = field(default_factory=lambda: [ModelConfig()])
    train: TrainConfig = field(default_factory=TrainConfig)
    check: CheckConfig = field(default_factory=CheckConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    _nested = {'ar': ARConfig, 'train': TrainConfig, 'check': CheckConfig,
               'analysis': AnalysisConfig}
    _nested_lists = {'models': ModelConfig}

    def apply_seed(self, seed: int) -> None:
        """Propagate a seed override into every section."""
        self.seed = seed
        self.seeds = [seed]
        self.ar.seed = seed
        self.train.seed = seed
        self.check.seed = seed
        self.analysis.seed = seed
        for model in self.models:
            model.seed = seed


def env_defaults() -> Dict[str, Any]:
    """Process-level defaults from the environment (.env already loaded)."""
    workers = os.environ.get('SSMLAB_WORKERS', '')
    try:
        workers = int(workers) if workers else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f'SSMLAB_WORKERS must be an integer, got {workers!r}',
                          field='SSMLAB_WORKERS')
    return {
        'output_dir': os.environ.get('SSMLAB_OUTPUT_DIR', 'output'),
        'workers': max(workers, 1),
        'log_level': os.environ.get('SSMLAB_LOG_LEVEL', 'WARNING').upper(),
    }


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a JSON experiment file, reporting the line of any syntax error."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f'Cannot read config file {path}: {e.strerror}')
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path}:{e.lineno}:{e.colno}: {e.msg}', line=e.lineno)
    if not isinstance(data, dict):
        raise ConfigError(f'{path}: top level must be an object', line=1)
    return data


def resolve_run_config(subcommand: str, config_path: Optional[str] = None,
                       output_dir: Optional[str] = None, seed: Optional[int] = None,
                       verbosity: int = 0, workers: Optional[int] = None) -> RunConfig:
    """
    Resolve a run configuration.

    Precedence: CLI flag > config file field > environment > built-in default.
    """
    env = env_defaults()
    data = load_config_file(config_path) if config_path else {}
    data = dict(data)
    data.setdefault('output_dir', env['output_dir'])
    data.setdefault('workers', env['workers'])
    for reserved in ('subcommand', 'config_path', 'verbosity'):
        data.pop(reserved, None)

    config = RunConfig.from_dict(data)
    config.subcommand = subcommand
    config.config_path = str(config_path) if config_path else None
    config.verbosity = verbosity
    if output_dir is not None:
        config.output_dir = output_dir
    if workers is not None:
        if workers < 1:
            raise ConfigError('--workers must be at least 1', field='workers')
        config.workers = workers
    if seed is not None:
        config.apply_seed(seed)
    elif config.seed is not None:
        config.apply_seed(config.seed)
    logger.debug('Resolved config for %s: %s', subcommand, config.to_dict())
    return config
