# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Experiment configuration.

Configuration documents use nested ``SECTION__KEY=value`` lines, e.g.::

    SEED=3
    MODE=rfl
    STREAM__STAGES=5
    TRAINING__TRANSFER_SGD__LR=8e-3

Every key, its cast and its default is listed in :data:`SCHEME`.
``BICR_<KEY>`` environment variables override the document.
"""

import dataclasses
import logging
import math
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from .exceptions import ImproperlyConfigured
from .losses import LossWeights
from .numkernel import SgdConfig
from .settings import ConfigEnv, Env

logger = logging.getLogger(__name__)

MODES = ('rfl', 'reindex', 'frozen', 'joint')
FUSION_STRATEGIES = ('dff', 'fixed', 'increasing', 'decreasing', 'none')
EPSILON_SCALES = ('clamp', 'halve')
STATS_SOURCES = ('current', 'snapshot')


@dataclass(frozen=True)
class StreamConfig:
    stages: int = 5
    ids_per_stage: int = 50
    samples_per_id: int = 20
    raw_dim: int = 48
    severity: float = 1.0
    noise_std: float = 0.5
    train_fraction: float = 0.5
    queries_per_id: int = 2


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    hidden_dim: int = 128
    depth: int = 3
    prototypes: int = 16
    bottleneck: int = 32
    logit_scale: float = 10.0
    gate_fixed: Optional[float] = None
    use_kcm: bool = True
    use_fmm: bool = True
    deep_hidden_dim: int = 512
    deep_hidden_layers: int = 8


@dataclass(frozen=True)
class TrainingConfig:
    baseline_epochs_first: int = 40
    baseline_epochs: int = 30
    transfer_epochs: int = 20
    ids_per_batch: int = 16
    samples_per_id: int = 4
    margin: float = 0.3
    baseline_sgd: SgdConfig = field(default_factory=lambda: SgdConfig(
        lr=0.05, decay_factor=0.1, decay_epoch=30, momentum=0.9))
    transfer_sgd: SgdConfig = field(default_factory=lambda: SgdConfig(
        lr=8e-3, decay_factor=0.1, decay_epoch=10, momentum=0.0))
    bidirectional: bool = True
    use_bcd: bool = True
    use_bad: bool = True
    stats_source: str = 'current'
    renormalize_masked_rows: bool = False


@dataclass(frozen=True)
class FusionConfig:
    strategy: str = 'dff'
    feature_fusion: bool = True
    epsilon_scale: str = 'clamp'
    epsilon_batch: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    mode: str = 'rfl'
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    output_dir: str = 'bicr-out'


optional_float = Env.optional(float)


def _scheme_of(cls, prefix='', defaults=None) -> Dict[str, Any]:
    defaults = cls() if defaults is None else defaults
    hints = typing.get_type_hints(cls)
    scheme = {}
    for f in dataclasses.fields(cls):
        key = f'{prefix}{f.name.upper()}'
        hint = hints[f.name]
        default = getattr(defaults, f.name)
        if dataclasses.is_dataclass(hint):
            scheme.update(_scheme_of(hint, f'{key}__', default))
        elif hint == Optional[float]:
            scheme[key] = (optional_float, default)
        else:
            scheme[key] = (hint, default)
    return scheme


#: ``KEY -> (cast, default)`` for every configuration key.
SCHEME: Dict[str, tuple] = _scheme_of(ExperimentConfig)

_CHOICES = {
    'MODE': MODES,
    'FUSION__STRATEGY': FUSION_STRATEGIES,
    'FUSION__EPSILON_SCALE': EPSILON_SCALES,
    'TRAINING__STATS_SOURCE': STATS_SOURCES,
}

_RANGES = {
    'SEED': (0, None),
    'STREAM__STAGES': (1, None),
    'STREAM__IDS_PER_STAGE': (4, None),
    'STREAM__SAMPLES_PER_ID': (4, None),
    'STREAM__RAW_DIM': (2, None),
    'STREAM__SEVERITY': (0, None),
    'STREAM__NOISE_STD': (0, None),
    'STREAM__QUERIES_PER_ID': (1, None),
    'MODEL__EMBED_DIM': (2, None),
    'MODEL__HIDDEN_DIM': (1, None),
    'MODEL__DEPTH': (2, None),
    'MODEL__PROTOTYPES': (1, None),
    'MODEL__BOTTLENECK': (1, None),
    'MODEL__LOGIT_SCALE': (0, None),
    'MODEL__GATE_FIXED': (0, 1),
    'MODEL__DEEP_HIDDEN_DIM': (1, None),
    'MODEL__DEEP_HIDDEN_LAYERS': (1, None),
    'TRAINING__BASELINE_EPOCHS_FIRST': (0, None),
    'TRAINING__BASELINE_EPOCHS': (0, None),
    'TRAINING__TRANSFER_EPOCHS': (0, None),
    'TRAINING__IDS_PER_BATCH': (2, None),
    'TRAINING__SAMPLES_PER_ID': (2, None),
    'TRAINING__MARGIN': (0, None),
    'FUSION__EPSILON_BATCH': (2, None),
}


def _flatten(tree: Dict[str, Any]) -> Dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        if isinstance(value, dict):
            for sub_key, sub_value in _flatten(value).items():
                flat[f'{key.upper()}__{sub_key}'] = sub_value
        else:
            flat[key.upper()] = value
    return flat


def _build(cls, tree: Dict[str, Any]):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, tree.get(f.name, {}))
        elif f.name in tree:
            kwargs[f.name] = tree[f.name]
    return cls(**kwargs)


def _check(env: Env, key: str, value):
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ImproperlyConfigured(
            f'{env.where(key)}: {key} must be one of {_CHOICES[key]}, '
            f'got {value!r}')
    if key in _RANGES and value is not None:
        low, high = _RANGES[key]
        if isinstance(value, float) and not math.isfinite(value):
            raise ImproperlyConfigured(
                f'{env.where(key)}: {key} must be finite')
        if (low is not None and value < low) or \
                (high is not None and value > high):
            bounds = f'[{low}, {"inf" if high is None else high}]'
            raise ImproperlyConfigured(
                f'{env.where(key)}: {key}={value} is outside {bounds}')


def _cross_check(cfg: ExperimentConfig, env: Env):
    stream = cfg.stream
    if not 0 < stream.train_fraction < 1:
        raise ImproperlyConfigured(
            f'{env.where("STREAM__TRAIN_FRACTION")}: train fraction must '
            f'lie in (0, 1), got {stream.train_fraction}')
    if stream.queries_per_id >= stream.samples_per_id:
        raise ImproperlyConfigured(
            f'{env.where("STREAM__QUERIES_PER_ID")}: queries_per_id must '
            f'be smaller than samples_per_id ({stream.samples_per_id})')


def load_config(path=None, environ=None, **overrides) -> ExperimentConfig:
    """Read, override and validate an experiment configuration.

    :param path: configuration document; ``None`` uses defaults only.
    :param environ: mapping searched for ``BICR_<KEY>`` overrides
        (defaults to ``os.environ``).
    :param overrides: ``KEY=value`` pairs applied last (e.g. from the
        command line); keys use the document spelling.
    :raises ImproperlyConfigured: naming the offending line or key.
    """
    env = ConfigEnv(environ=environ, **SCHEME)
    if path is not None:
        document = env.read_env(path, parse_comments=True, strict=True)
        for key in document:
            if key not in SCHEME:
                raise ImproperlyConfigured(
                    f'{env.where(key)}: unknown configuration key {key}')
    unknown = sorted(set(overrides) - set(SCHEME))
    if unknown:
        raise ImproperlyConfigured(
            f'unknown configuration keys: {", ".join(unknown)}')

    tree: Dict[str, Any] = {}
    for key, (cast, _) in SCHEME.items():
        if key in overrides:
            try:
                value = Env.parse_value(overrides[key], cast) \
                    if isinstance(overrides[key], str) else overrides[key]
            except (TypeError, ValueError) as exc:
                raise ImproperlyConfigured(
                    f'override {key}={overrides[key]!r}: {exc}') from exc
        else:
            value = env(key)
        _check(env, key, value)
        node = tree
        parts = key.lower().split('__')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    try:
        cfg = _build(ExperimentConfig, tree)
    except ImproperlyConfigured as exc:
        raise ImproperlyConfigured(f'{path or "<defaults>"}: {exc}') from exc
    _cross_check(cfg, env)
    logger.debug('loaded configuration from %s', path or '<defaults>')
    return cfg


def _render(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if value is None:
        return 'none'
    return repr(value) if isinstance(value, float) else str(value)


def config_to_dict(cfg: ExperimentConfig, include_output=True) -> Dict:
    """Flat ``KEY -> value`` mapping of ``cfg``."""
    flat = _flatten(dataclasses.asdict(cfg))
    if not include_output:
        flat.pop('OUTPUT_DIR', None)
    return flat


#: Keys that only the re-indexing-free mode reads.
RFL_ONLY_KEYS = ('FUSION__FEATURE_FUSION',)


def report_config(cfg: ExperimentConfig) -> Dict:
    """The part of ``cfg`` that can influence a run of ``cfg.mode``.

    Output paths and keys the mode never reads are left out, so runs that
    differ only in those keys report and hash identically.
    """
    flat = config_to_dict(cfg, include_output=False)
    if cfg.mode != 'rfl':
        for key in RFL_ONLY_KEYS:
            flat.pop(key, None)
    return flat


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` as a document :func:`load_config` reads back."""
    lines = ['# effective bicr configuration']
    for key, value in config_to_dict(cfg).items():
        lines.append(f'{key}={_render(value)}')
    return '\n'.join(lines) + '\n'
