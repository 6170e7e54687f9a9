# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""Exceptions and warnings raised by bicr."""

__all__ = [
    'BicrError',
    'ImproperlyConfigured',
    'DimensionError',
    'DegenerateVectorError',
    'InsufficientBatchError',
    'TrainingDivergedError',
    'EvaluationError',
    'MaskPatternError',
    'NoOldClassifierError',
    'UnlearnableSplitError',
    'InsufficientDataError',
    'StaleStoreError',
    'SkippedStageError',
    'EmptyGalleryError',
    'GalleryFormatError',
    'ProtocolError',
    'EpsilonUndefinedError',
    'ArchitectureMismatchError',
    'PrivacyViolationError',
    'UndefinedMetricError',
    'AcceptanceError',
    'ExcludedQueryWarning',
    'DegenerateBatchWarning',
]


class BicrError(Exception):
    """Base class of every error raised by the package."""


class ImproperlyConfigured(BicrError):
    """The experiment is somehow improperly configured"""


class DimensionError(BicrError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateVectorError(BicrError, ValueError):
    """A vector with (near) zero norm reached a normalizing operation."""


class InsufficientBatchError(BicrError, ValueError):
    """Batch statistics were requested from fewer than two rows."""


class TrainingDivergedError(BicrError):
    """A loss or gradient became non-finite."""


class EvaluationError(BicrError):
    """An objective evaluated during a gradient check was non-finite."""


class MaskPatternError(BicrError, ValueError):
    """Two masked affinities do not share the same identity mask."""


class NoOldClassifierError(BicrError):
    """Anti-forgetting logits were requested without old identities."""


class UnlearnableSplitError(BicrError, ValueError):
    """A training split cannot support metric learning."""


class InsufficientDataError(BicrError, ValueError):
    """Too few samples to estimate a statistic."""


class StaleStoreError(BicrError):
    """The gallery store is not at the version the caller expects."""


class SkippedStageError(BicrError):
    """A gallery update would jump over a feature-space version."""


class EmptyGalleryError(BicrError):
    """A query was ranked against an empty gallery."""


class GalleryFormatError(BicrError):
    """A persisted gallery file is malformed.

    :param offset: byte offset at which the problem was detected.
    """

    def __init__(self, message, offset):
        super().__init__(f'{message} (at byte offset {offset})')
        self.offset = offset


class ProtocolError(BicrError):
    """Stages were executed out of order."""


class EpsilonUndefinedError(BicrError):
    """The knowledge-change coefficient needs two models."""


class ArchitectureMismatchError(BicrError, ValueError):
    """Two models that should share an architecture do not."""


class PrivacyViolationError(BicrError):
    """Raw inputs of a closed stage were requested in a private store."""


class UndefinedMetricError(BicrError, ValueError):
    """A retrieval metric is undefined for the given ranking."""


class AcceptanceError(BicrError):
    """A verification verdict failed."""


class ExcludedQueryWarning(UserWarning):
    """Warning used when a query has no relevant gallery entry."""


class DegenerateBatchWarning(UserWarning):
    """Warning used when every row of a batch was skipped by a loss."""
