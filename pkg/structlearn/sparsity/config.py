"""Versioned YAML experiment configuration."""
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import yaml

from .errors import ConfigError
from .network import NetworkModel
from .presets import PRESETS, build_from_layers, build_preset
from .regularizer import DEFAULT_EPSILON, DEFAULT_ZERO_THRESHOLD, GroupingScheme, SchemeKind, SslConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
PHASES = ('baseline', 'ssl', 'compact', 'finetune')
FINETUNE_RATE_FACTOR = 0.1

TRAIN_KEYS = ('learning_rate', 'momentum', 'weight_decay', 'batch_size', 'epochs', 'lr_schedule', 'seed')


@dataclass(frozen=True)
class NetworkConfig:
    preset: Optional[str] = None
    input_shape: Optional[Tuple[int, ...]] = None
    layers: Tuple[dict, ...] = ()

    def __post_init__(self):
        if (self.preset is None) == (not self.layers):
            raise ConfigError("Network needs exactly one of `preset` or `layers`")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"Unknown network preset {self.preset!r}; choose one of {sorted(PRESETS)}")
        if self.layers and not self.input_shape:
            raise ConfigError("A custom network needs `input_shape`")

    def build(self, seed: int = 0) -> NetworkModel:
        if self.preset is not None:
            return build_preset(self.preset, seed)
        return build_from_layers(self.input_shape, self.layers, seed)


@dataclass(frozen=True)
class DatasetConfig:
    format: str = 'mnist'
    path: str = 'data/mnist'
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None

    def __post_init__(self):
        if self.format not in ('mnist', 'cifar10'):
            raise ConfigError(f"Unknown dataset format {self.format!r}")


@dataclass(frozen=True)
class SweepConfig:
    scheme: SchemeKind
    strengths: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'scheme', SchemeKind(self.scheme))
        object.__setattr__(self, 'strengths', tuple(float(s) for s in self.strengths))
        if not self.strengths:
            raise ConfigError("Sweep grid is empty")


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    ssl: Optional[SslConfig] = None
    phases: Tuple[str, ...] = ('baseline',)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    output_dir: Path = Path('runs')
    phase_overrides: Mapping[str, Mapping] = field(default_factory=dict)
    finetune_rate_factor: float = FINETUNE_RATE_FACTOR
    baseline_checkpoint: Optional[Path] = None
    threads: int = 1
    report_speedup: bool = False
    sweep: Optional[SweepConfig] = None

    def __post_init__(self):
        object.__setattr__(self, 'phases', tuple(self.phases))
        object.__setattr__(self, 'output_dir', Path(self.output_dir))
        if self.baseline_checkpoint is not None:
            object.__setattr__(self, 'baseline_checkpoint', Path(self.baseline_checkpoint))

        if not self.phases:
            raise ConfigError("At least one phase is required")
        unknown = [phase for phase in self.phases if phase not in PHASES]
        if unknown:
            raise ConfigError(f"Unknown phases {unknown}; choose from {list(PHASES)}")
        order = [PHASES.index(phase) for phase in self.phases]
        if any(later <= earlier for earlier, later in zip(order, order[1:])):
            raise ConfigError(f"Phases must follow the order {' < '.join(PHASES)}")
        if 'ssl' in self.phases and self.ssl is None:
            raise ConfigError("The ssl phase requires an `ssl` section")
        for phase, overrides in self.phase_overrides.items():
            if phase not in PHASES:
                raise ConfigError(f"Override for unknown phase {phase!r}")
            bad = set(overrides) - set(TRAIN_KEYS)
            if bad:
                raise ConfigError(f"Unknown training keys {sorted(bad)} for phase {phase!r}")
        if not self.finetune_rate_factor > 0:
            raise ConfigError("`finetune_rate_factor` must be positive")
        if self.threads < 1:
            raise ConfigError("`threads` must be positive")

    @property
    def zero_threshold(self) -> float:
        return self.ssl.zero_threshold if self.ssl is not None else DEFAULT_ZERO_THRESHOLD

    def build_model(self) -> NetworkModel:
        return self.network.build(self.train.seed)

    def train_config_for(self, phase: str) -> TrainConfig:
        """Training settings of ``phase``: the base settings, fine-tune rate scaling, then overrides.

        Each phase shuffles with its own seed offset so phases never replay
        the same batch order.
        """
        cfg = replace(self.train, seed=self.train.seed + PHASES.index(phase))
        if phase == 'finetune':
            cfg = cfg.scaled(self.finetune_rate_factor)
        overrides = self.phase_overrides.get(phase)
        if overrides:
            cfg = _parse_train({**_train_dict(cfg), **overrides})
        return cfg

    def with_overrides(self, seed: int = None, output_dir: Union[str, Path] = None, epochs: int = None,
                       phases: Sequence[str] = None, strengths: Mapping[str, float] = None,
                       threads: int = None, baseline_checkpoint: Union[str, Path] = None) -> 'ExperimentConfig':
        """Apply command-line overrides; ``strengths`` maps scheme kinds to new strengths."""
        changes = {}
        train = self.train
        if seed is not None:
            train = replace(train, seed=seed)
        if epochs is not None:
            train = replace(train, epochs=epochs)
        if train is not self.train:
            changes['train'] = train
        if output_dir is not None:
            changes['output_dir'] = Path(output_dir)
        if phases is not None:
            changes['phases'] = tuple(phases)
        if threads is not None:
            changes['threads'] = threads
        if baseline_checkpoint is not None:
            changes['baseline_checkpoint'] = Path(baseline_checkpoint)
        if strengths:
            changes['ssl'] = with_strengths(self.ssl, strengths)
        return replace(self, **changes) if changes else self

    def to_dict(self) -> dict:
        """Plain-data form accepted by ``from_dict``."""
        data = {
            'version': CONFIG_VERSION,
            'network': _network_dict(self.network),
            'train': _train_dict(self.train),
            'phases': list(self.phases),
            'dataset': asdict(self.dataset),
            'output_dir': str(self.output_dir),
            'finetune_rate_factor': self.finetune_rate_factor,
            'threads': self.threads,
            'report_speedup': self.report_speedup,
        }
        if self.ssl is not None:
            data['ssl'] = _ssl_dict(self.ssl)
        if self.phase_overrides:
            data['phase_overrides'] = {phase: dict(values) for phase, values in self.phase_overrides.items()}
        if self.baseline_checkpoint is not None:
            data['baseline_checkpoint'] = str(self.baseline_checkpoint)
        if self.sweep is not None:
            data['sweep'] = {'scheme': self.sweep.scheme.value, 'strengths': list(self.sweep.strengths)}
        return data


def with_strengths(ssl: Optional[SslConfig], strengths: Mapping[str, float]) -> SslConfig:
    """Replace (or add) the strength of each named scheme kind."""
    schemes = list(ssl.schemes) if ssl is not None else []
    for kind, strength in strengths.items():
        kind = SchemeKind(kind) if not isinstance(kind, SchemeKind) else kind
        matches = [i for i, scheme in enumerate(schemes) if scheme.kind is kind]
        if matches:
            for i in matches:
                schemes[i] = replace(schemes[i], strength=float(strength))
        else:
            schemes.append(GroupingScheme(kind, float(strength)))
    if ssl is None:
        return SslConfig(tuple(schemes))
    return replace(ssl, schemes=tuple(schemes))


def _network_dict(network: NetworkConfig) -> dict:
    if network.preset is not None:
        return {'preset': network.preset}
    return {'input_shape': list(network.input_shape), 'layers': [dict(layer) for layer in network.layers]}


def _train_dict(train: TrainConfig) -> dict:
    data = asdict(train)
    data['lr_schedule'] = [list(entry) for entry in train.lr_schedule]
    return data


def _ssl_dict(ssl: SslConfig) -> dict:
    schemes = []
    for scheme in ssl.schemes:
        entry = {'kind': scheme.kind.value, 'strength': scheme.strength}
        if scheme.layers is not None:
            entry['layers'] = list(scheme.layers)
        if scheme.column_strength is not None:
            entry['column_strength'] = scheme.column_strength
        schemes.append(entry)
    return {
        'schemes': schemes,
        'epsilon': ssl.epsilon,
        'zero_threshold': ssl.zero_threshold,
        'couple_filter_channel': ssl.couple_filter_channel,
    }


def _float(value, name: str) -> float:
    # YAML 1.1 reads exponents without a dot (1e-4) as strings
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"`{name}` must be a number, got {value!r}")


def _parse_train(data: Mapping) -> TrainConfig:
    unknown = set(data) - set(TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"Unknown `train` keys: {sorted(unknown)}")
    defaults = TrainConfig()
    return TrainConfig(
        learning_rate=_float(data.get('learning_rate', defaults.learning_rate), 'learning_rate'),
        momentum=_float(data.get('momentum', defaults.momentum), 'momentum'),
        weight_decay=_float(data.get('weight_decay', defaults.weight_decay), 'weight_decay'),
        batch_size=int(data.get('batch_size', defaults.batch_size)),
        epochs=int(data.get('epochs', defaults.epochs)),
        lr_schedule=tuple(tuple(entry) for entry in data.get('lr_schedule', ())),
        seed=int(data.get('seed', defaults.seed)),
    )


def _parse_ssl(data: Mapping) -> SslConfig:
    schemes = []
    for entry in data.get('schemes') or ():
        if 'kind' not in entry:
            raise ConfigError(f"Scheme entry {entry!r} has no `kind`")
        column = entry.get('column_strength')
        schemes.append(GroupingScheme(
            kind=entry['kind'],
            strength=_float(entry.get('strength', 0.0), 'strength'),
            layers=tuple(entry['layers']) if entry.get('layers') is not None else None,
            column_strength=None if column is None else _float(column, 'column_strength'),
        ))
    return SslConfig(
        schemes=tuple(schemes),
        epsilon=_float(data.get('epsilon', DEFAULT_EPSILON), 'epsilon'),
        zero_threshold=_float(data.get('zero_threshold', DEFAULT_ZERO_THRESHOLD), 'zero_threshold'),
        couple_filter_channel=bool(data.get('couple_filter_channel', True)),
    )


def config_from_dict(data: Mapping) -> ExperimentConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("Configuration must be a mapping")
    version = data.get('version')
    if version != CONFIG_VERSION:
        raise ConfigError(f"Unsupported configuration version {version!r}; expected {CONFIG_VERSION}")

    network = data.get('network') or {}
    dataset = data.get('dataset') or {}
    sweep = data.get('sweep')
    try:
        return ExperimentConfig(
            network=NetworkConfig(
                preset=network.get('preset'),
                input_shape=tuple(network['input_shape']) if network.get('input_shape') else None,
                layers=tuple(network.get('layers') or ()),
            ),
            train=_parse_train(data.get('train') or {}),
            ssl=_parse_ssl(data['ssl']) if data.get('ssl') else None,
            phases=tuple(data.get('phases') or ('baseline',)),
            dataset=DatasetConfig(
                format=dataset.get('format', 'mnist'),
                path=str(dataset.get('path', 'data/mnist')),
                train_limit=dataset.get('train_limit'),
                test_limit=dataset.get('test_limit'),
            ),
            output_dir=Path(data.get('output_dir', 'runs')),
            phase_overrides=dict(data.get('phase_overrides') or {}),
            finetune_rate_factor=_float(data.get('finetune_rate_factor', FINETUNE_RATE_FACTOR),
                                        'finetune_rate_factor'),
            baseline_checkpoint=data.get('baseline_checkpoint'),
            threads=int(data.get('threads', 1)),
            report_speedup=bool(data.get('report_speedup', False)),
            sweep=SweepConfig(sweep['scheme'], sweep.get('strengths', ())) if sweep else None,
        )
    except (TypeError, KeyError) as e:
        raise ConfigError(f"Malformed configuration: {e}") from e
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Malformed configuration: {e}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"Cannot read configuration {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}") from e
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
