# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Versioned gallery feature store.

The store only ever holds features, never raw inputs. Features are kept as
fp32 columns; writers build new columns and swap them in under a lock, so a
reader always sees one consistent version of the store.

Binary layout (all little-endian)::

    magic      8 bytes  b'BICRGAL1'
    version    u32      1
    dim        u32      feature width C
    current    u32      current feature-space version
    count      u64      number of records
    records    count x (u64 entry_id, u32 identity, u32 origin_stage,
                        u32 space_version, C x f32 feature)
"""

import logging
import struct
import threading
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .exceptions import (
    DimensionError,
    EmptyGalleryError,
    GalleryFormatError,
    ImproperlyConfigured,
    ProtocolError,
    SkippedStageError,
    StaleStoreError,
)
from .numkernel import as_matrix, l2_normalize

logger = logging.getLogger(__name__)

MAGIC = b'BICRGAL1'
FORMAT_VERSION = 1
HEADER = struct.Struct('<8sIIIQ')
#: Rows pushed through a transfer network at once.
TRANSFER_CHUNK = 2048


def record_dtype(dim: int) -> np.dtype:
    """Packed on-disk dtype of one record."""
    return np.dtype([
        ('entry_id', '<u8'),
        ('identity', '<u4'),
        ('origin_stage', '<u4'),
        ('space_version', '<u4'),
        ('feature', '<f4', (dim,)),
    ])


@dataclass(frozen=True)
class GalleryRecord:
    entry_id: int
    identity: int
    origin_stage: int
    feature: np.ndarray
    space_version: int

    def __post_init__(self):
        if self.space_version < self.origin_stage:
            raise ValueError(
                f'record {self.entry_id}: space version '
                f'{self.space_version} precedes origin {self.origin_stage}')


class _Columns(NamedTuple):
    entry_ids: np.ndarray
    identities: np.ndarray
    origin_stages: np.ndarray
    space_versions: np.ndarray
    features: np.ndarray


@dataclass(frozen=True)
class Ranking:
    """Gallery rows ordered by descending cosine, ties by entry id."""

    entry_ids: np.ndarray
    identities: np.ndarray
    origin_stages: np.ndarray
    scores: np.ndarray


def _empty_columns(dim: int) -> _Columns:
    return _Columns(np.zeros(0, np.uint64), np.zeros(0, np.uint32),
                    np.zeros(0, np.uint32), np.zeros(0, np.uint32),
                    np.zeros((0, dim), np.float32))


class GalleryStore:
    """Append-only feature records upgraded in place between stages."""

    def __init__(self, dim: int, current_version=1):
        if dim < 1:
            raise DimensionError(f'feature width must be >= 1, got {dim}')
        self.dim = int(dim)
        self.current_version = int(current_version)
        self._columns = _empty_columns(self.dim)
        self._lock = threading.Lock()

    def __len__(self):
        return int(self._columns.entry_ids.size)

    def __eq__(self, other):
        if not isinstance(other, GalleryStore):
            return NotImplemented
        return (self.dim == other.dim
                and self.current_version == other.current_version
                and all(np.array_equal(a, b) for a, b in
                        zip(self._columns, other._columns)))

    def __repr__(self):
        return (f'<GalleryStore dim={self.dim} '
                f'version={self.current_version} records={len(self)}>')

    @property
    def entry_ids(self) -> np.ndarray:
        return self._columns.entry_ids.copy()

    @property
    def identities(self) -> np.ndarray:
        return self._columns.identities.copy()

    @property
    def origin_stages(self) -> np.ndarray:
        return self._columns.origin_stages.copy()

    @property
    def space_versions(self) -> np.ndarray:
        return self._columns.space_versions.copy()

    @property
    def features(self) -> np.ndarray:
        return self._columns.features.copy()

    def records(self) -> Iterator[GalleryRecord]:
        cols = self._columns
        for i in range(cols.entry_ids.size):
            yield GalleryRecord(int(cols.entry_ids[i]),
                                int(cols.identities[i]),
                                int(cols.origin_stages[i]),
                                cols.features[i].copy(),
                                int(cols.space_versions[i]))

    def append_features(self, features, identities, stage: int) -> np.ndarray:
        """Add features extracted at ``stage``; return their entry ids."""
        features = as_matrix(features)
        identities = np.asarray(identities)
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise DimensionError(
                f'expected (rows, {self.dim}) features, got {features.shape}')
        if identities.shape != (features.shape[0],):
            raise DimensionError(
                f'{identities.size} identities for {features.shape[0]} rows')
        if not np.all(np.isfinite(features)):
            raise ValueError('gallery features must be finite')
        with self._lock:
            if stage != self.current_version:
                raise StaleStoreError(
                    f'store is at version {self.current_version}, '
                    f'cannot append stage {stage} features')
            cols = self._columns
            start = int(cols.entry_ids.max()) + 1 if cols.entry_ids.size \
                else 0
            ids = np.arange(start, start + features.shape[0],
                            dtype=np.uint64)
            stage_col = np.full(features.shape[0], stage, dtype=np.uint32)
            self._columns = _Columns(
                np.concatenate([cols.entry_ids, ids]),
                np.concatenate([cols.identities,
                                identities.astype(np.uint32)]),
                np.concatenate([cols.origin_stages, stage_col]),
                np.concatenate([cols.space_versions, stage_col]),
                np.concatenate([cols.features,
                                features.astype(np.float32)]),
            )
        logger.debug('appended %d stage-%d features', ids.size, stage)
        return ids

    def _check_next(self, new_stage: int):
        if new_stage > self.current_version + 1:
            raise SkippedStageError(
                f'store is at version {self.current_version}, '
                f'cannot jump to {new_stage}')
        if new_stage <= self.current_version:
            raise StaleStoreError(
                f'store is already at version {self.current_version}')

    def update_all(self, transfer, epsilon: float, new_stage: int):
        """Move every record into the ``new_stage`` space.

        Each feature becomes ``epsilon * old + (1 - epsilon) *
        normalize(transfer(old))``.
        """
        if not 0.0 <= epsilon <= 1.0:
            raise ImproperlyConfigured(
                f'fusion weight must lie in [0, 1], got {epsilon}')
        if getattr(transfer, 'direction', 'forward') != 'forward':
            raise ProtocolError('gallery updates need a forward network')
        if getattr(transfer, 'training', False):
            raise ProtocolError('transfer network must be in eval mode')
        with self._lock:
            self._check_next(new_stage)
            cols = self._columns
            old = cols.features.astype(np.float64)
            moved = np.empty_like(old)
            for i in range(0, old.shape[0], TRANSFER_CHUNK):
                chunk = old[i:i + TRANSFER_CHUNK]
                moved[i:i + TRANSFER_CHUNK] = l2_normalize(
                    transfer.forward(chunk))
            fused = epsilon * old + (1.0 - epsilon) * moved
            self._columns = cols._replace(
                features=fused.astype(np.float32),
                space_versions=np.full_like(cols.space_versions, new_stage))
            self.current_version = new_stage
        logger.info('updated %d gallery features to version %d '
                    '(fusion weight %.4f)', old.shape[0], new_stage, epsilon)

    def advance(self, new_stage: int):
        """Open ``new_stage`` without touching historical records."""
        with self._lock:
            self._check_next(new_stage)
            self.current_version = new_stage

    def reextract_all(self, features, new_stage: int):
        """Replace every feature (in entry order) with a re-extraction."""
        features = as_matrix(features)
        with self._lock:
            self._check_next(new_stage)
            cols = self._columns
            if features.shape != cols.features.shape:
                raise DimensionError(
                    f'expected {cols.features.shape} features, '
                    f'got {features.shape}')
            self._columns = cols._replace(
                features=features.astype(np.float32),
                space_versions=np.full_like(cols.space_versions, new_stage))
            self.current_version = new_stage

    def _scores(self, queries: np.ndarray) -> np.ndarray:
        feats = self._columns.features.astype(np.float64)
        norms = np.linalg.norm(feats, axis=1)
        return (l2_normalize(queries) @ feats.T) / \
            np.where(norms > 0, norms, 1.0)

    def rank_query(self, q) -> Ranking:
        """Rank every record against ``q``."""
        cols = self._columns
        if cols.entry_ids.size == 0:
            raise EmptyGalleryError('cannot rank against an empty gallery')
        q = as_matrix(q).reshape(1, -1)
        if q.shape[1] != self.dim:
            raise DimensionError(f'query width {q.shape[1]} != {self.dim}')
        scores = self._scores(q)[0]
        order = np.lexsort((cols.entry_ids, -scores))
        return Ranking(cols.entry_ids[order], cols.identities[order],
                       cols.origin_stages[order], scores[order])

    def rank_identities(self, queries) -> np.ndarray:
        """Gallery identities in rank order for every query row."""
        cols = self._columns
        if cols.entry_ids.size == 0:
            raise EmptyGalleryError('cannot rank against an empty gallery')
        scores = self._scores(as_matrix(queries))
        ranked = np.empty(scores.shape, dtype=np.int64)
        for i, row in enumerate(scores):
            ranked[i] = cols.identities[np.lexsort((cols.entry_ids, -row))]
        return ranked

    def persist(self, path):
        """Write the store in the binary layout described above."""
        cols = self._columns
        records = np.empty(cols.entry_ids.size, dtype=record_dtype(self.dim))
        records['entry_id'] = cols.entry_ids
        records['identity'] = cols.identities
        records['origin_stage'] = cols.origin_stages
        records['space_version'] = cols.space_versions
        records['feature'] = cols.features
        with open(path, 'wb') as f:
            f.write(HEADER.pack(MAGIC, FORMAT_VERSION, self.dim,
                                self.current_version, records.size))
            f.write(records.tobytes())
        logger.info('wrote %d gallery records to %s', records.size, path)

    @classmethod
    def load(cls, path) -> 'GalleryStore':
        with open(path, 'rb') as f:
            blob = f.read()
        return cls.from_bytes(blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> 'GalleryStore':
        if len(blob) < HEADER.size:
            raise GalleryFormatError('truncated header', offset=len(blob))
        magic, version, dim, current, count = HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise GalleryFormatError(f'bad magic {magic!r}', offset=0)
        if version != FORMAT_VERSION:
            raise GalleryFormatError(
                f'unsupported format version {version}', offset=8)
        if dim < 1:
            raise GalleryFormatError(f'bad feature width {dim}', offset=12)
        dtype = record_dtype(dim)
        body = len(blob) - HEADER.size
        if body < count * dtype.itemsize:
            whole = body // dtype.itemsize
            raise GalleryFormatError(
                f'truncated after {whole} of {count} records',
                offset=HEADER.size + whole * dtype.itemsize)
        if body > count * dtype.itemsize:
            raise GalleryFormatError(
                'trailing bytes after the last record',
                offset=HEADER.size + count * dtype.itemsize)
        records = np.frombuffer(blob, dtype=dtype, count=count,
                                offset=HEADER.size)
        store = cls(dim, current_version=current)
        store._columns = _Columns(
            records['entry_id'].copy(), records['identity'].copy(),
            records['origin_stage'].copy(), records['space_version'].copy(),
            np.ascontiguousarray(records['feature'], dtype=np.float32),
        )
        return store


def append_features(store: GalleryStore, features, identities, stage: int):
    return store.append_features(features, identities, stage)


def update_all(store: GalleryStore, transfer, epsilon: float,
               new_stage: int):
    store.update_all(transfer, epsilon, new_stage)


def rank_query(store: GalleryStore, q) -> Ranking:
    return store.rank_query(q)


def persist(store: GalleryStore, path):
    store.persist(path)


def load(path) -> GalleryStore:
    return GalleryStore.load(path)

