# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Synthetic lifelong retrieval streams.

Every identity is a Gaussian around a base mean. Every stage owns a domain
map ``x -> rotation @ (scale * x) + shift`` whose distance from the identity
map grows with ``severity``; a stage's samples are the mapped base mean plus
isotropic noise. Identity labels never repeat across stages, and within a
stage the training identities and the gallery identities are disjoint.
Queries are held-out samples of gallery identities.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Union

import numpy as np
from scipy import linalg

from .exceptions import ImproperlyConfigured, InsufficientDataError

logger = logging.getLogger(__name__)

MIN_IDS_PER_STAGE = 4
MIN_SAMPLES_PER_ID = 4


@dataclass(frozen=True)
class DomainSpec:
    """Affine domain map of one stage."""

    rotation: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    noise_std: float
    severity: float

    def __post_init__(self):
        if np.any(self.scale <= 0):
            raise ValueError('domain scale must be positive')

    @classmethod
    def draw(cls, dim: int, severity: float, noise_std: float,
             rng: np.random.Generator) -> 'DomainSpec':
        gauss = rng.normal(size=(dim, dim))
        skew = (gauss - gauss.T) / np.sqrt(2.0 * dim)
        rotation = linalg.expm(severity * skew)
        scale = np.exp(severity * 0.5 * rng.normal(size=dim))
        shift = severity * 0.5 * rng.normal(size=dim)
        return cls(rotation, scale, shift, float(noise_std), float(severity))

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) * self.scale) \
            @ self.rotation.T + self.shift

    def invert(self, y) -> np.ndarray:
        return ((np.asarray(y, dtype=np.float64) - self.shift)
                @ self.rotation) / self.scale


@dataclass(frozen=True)
class IdentitySpec:
    label: int
    base_mean: np.ndarray


@dataclass(frozen=True)
class SyntheticSample:
    x: np.ndarray
    y: int
    stage: int


@dataclass(frozen=True)
class SampleSet:
    """Rows of raw inputs ``x`` with identity labels ``y``."""

    x: np.ndarray
    y: np.ndarray
    stage: int

    def __len__(self):
        return int(self.y.shape[0])

    def __getitem__(self, index) -> SyntheticSample:
        return SyntheticSample(self.x[index], int(self.y[index]), self.stage)

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.y)

    def counts(self) -> Dict[int, int]:
        labels, counts = np.unique(self.y, return_counts=True)
        return dict(zip(labels.tolist(), counts.tolist()))

    def take(self, index) -> 'SampleSet':
        return SampleSet(self.x[index], self.y[index], self.stage)

    @classmethod
    def concatenate(cls, sets: List['SampleSet'], stage=None) -> 'SampleSet':
        return cls(np.concatenate([s.x for s in sets]),
                   np.concatenate([s.y for s in sets]),
                   sets[-1].stage if stage is None else stage)


@dataclass(frozen=True)
class StageData:
    stage: int
    train: SampleSet
    gallery: SampleSet
    query: SampleSet
    domain: DomainSpec


def make_stream(stages: int, ids_per_stage: int, samples_per_id: int,
                raw_dim: int, severity: float, rng: np.random.Generator,
                noise_std=0.5, train_fraction=0.5,
                queries_per_id=2) -> List[StageData]:
    """Generate ``stages`` stages of synthetic identities (stages are 1-based).
    """
    if stages < 1:
        raise ImproperlyConfigured(f'need at least one stage, got {stages}')
    if ids_per_stage < MIN_IDS_PER_STAGE:
        raise ImproperlyConfigured(
            f'ids_per_stage must be >= {MIN_IDS_PER_STAGE}, '
            f'got {ids_per_stage}')
    if samples_per_id < MIN_SAMPLES_PER_ID:
        raise ImproperlyConfigured(
            f'samples_per_id must be >= {MIN_SAMPLES_PER_ID}, '
            f'got {samples_per_id}')
    if not 1 <= queries_per_id < samples_per_id:
        raise ImproperlyConfigured(
            f'queries_per_id must be in [1, {samples_per_id}), '
            f'got {queries_per_id}')
    if severity < 0 or noise_std < 0:
        raise ImproperlyConfigured('severity and noise_std must be >= 0')
    n_train = int(round(ids_per_stage * train_fraction))
    n_train = min(max(n_train, 2), ids_per_stage - 2)

    stream = []
    for stage in range(1, stages + 1):
        domain = DomainSpec.draw(raw_dim, severity, noise_std, rng)
        first = (stage - 1) * ids_per_stage
        identities = [IdentitySpec(first + j, rng.normal(size=raw_dim))
                      for j in range(ids_per_stage)]
        order = rng.permutation(ids_per_stage)
        train_ids = {identities[j].label for j in order[:n_train]}

        parts = {'train': [], 'gallery': [], 'query': []}
        for ident in identities:
            center = domain.apply(ident.base_mean[None, :])
            x = center + noise_std * rng.normal(
                size=(samples_per_id, raw_dim))
            y = np.full(samples_per_id, ident.label, dtype=np.int64)
            if ident.label in train_ids:
                parts['train'].append((x, y))
            else:
                parts['query'].append((x[:queries_per_id],
                                       y[:queries_per_id]))
                parts['gallery'].append((x[queries_per_id:],
                                         y[queries_per_id:]))

        def collect(name, stage=stage):
            xs, ys = zip(*parts[name])
            return SampleSet(np.concatenate(xs), np.concatenate(ys), stage)

        stream.append(StageData(stage, collect('train'), collect('gallery'),
                                collect('query'), domain))
        logger.debug('stage %d: %d train ids, %d gallery ids', stage,
                     n_train, ids_per_stage - n_train)
    return stream


def sample_batch(stage: Union[StageData, SampleSet], ids: int,
                 per_id: int, rng: np.random.Generator) -> SampleSet:
    """PK batch: ``ids`` random identities with ``per_id`` samples each."""
    data = stage.train if isinstance(stage, StageData) else stage
    eligible = [label for label, count in sorted(data.counts().items())
                if count >= per_id]
    if len(eligible) < ids:
        raise InsufficientDataError(
            f'need {ids} identities with >= {per_id} samples, '
            f'found {len(eligible)}')
    chosen = rng.choice(eligible, size=ids, replace=False)
    rows = []
    for label in chosen:
        candidates = np.flatnonzero(data.y == label)
        rows.append(rng.choice(candidates, size=per_id, replace=False))
    return data.take(np.concatenate(rows))


def save_stream(path, stream: List[StageData]):
    """Write a stream to a ``.npz`` archive."""
    arrays = {}
    for data in stream:
        prefix = f'stage{data.stage}'
        for part in ('train', 'gallery', 'query'):
            samples = getattr(data, part)
            arrays[f'{prefix}_{part}_x'] = samples.x
            arrays[f'{prefix}_{part}_y'] = samples.y
        for name in ('rotation', 'scale', 'shift'):
            arrays[f'{prefix}_domain_{name}'] = getattr(data.domain, name)
        arrays[f'{prefix}_domain_params'] = np.array(
            [data.domain.noise_std, data.domain.severity])
    arrays['stages'] = np.array([d.stage for d in stream], dtype=np.int64)
    np.savez(path, **arrays)


def load_stream(path) -> List[StageData]:
    """Read a stream written by :func:`save_stream`."""
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise ImproperlyConfigured(f'{path}: cannot read stream: {exc}') \
            from exc
    with archive:
        stream = []
        for stage in archive['stages'].tolist():
            prefix = f'stage{stage}'
            noise_std, severity = archive[f'{prefix}_domain_params']
            domain = DomainSpec(archive[f'{prefix}_domain_rotation'],
                                archive[f'{prefix}_domain_scale'],
                                archive[f'{prefix}_domain_shift'],
                                float(noise_std), float(severity))
            sets = [SampleSet(archive[f'{prefix}_{part}_x'],
                              archive[f'{prefix}_{part}_y'], stage)
                    for part in ('train', 'gallery', 'query')]
            stream.append(StageData(stage, *sets, domain))
    return stream
