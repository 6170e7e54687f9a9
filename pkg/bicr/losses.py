# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Training objective of the transfer networks.

Four component losses are evaluated per transfer direction:

* ``bca`` aligns transferred features with the target-space features;
* ``bcr`` distils cross-identity relations of the source space;
* ``af`` keeps the source classifier's identity posterior on the
  transferred features (anti-forgetting);
* ``dc`` keeps the transfer moving the same way the models moved.

All of them are positive penalties. Each component is averaged over the
forward and backward directions, then weighted by ``mu1..mu4``. Every
component also comes with its gradient with respect to the raw transfer
network output, so the objective can be back-propagated through
:class:`~bicr.bict.BiCTNetwork`.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Protocol, Tuple

import numpy as np
from scipy import special

from .exceptions import (
    DegenerateBatchWarning,
    DimensionError,
    ImproperlyConfigured,
    InsufficientBatchError,
    InsufficientDataError,
    MaskPatternError,
    NoOldClassifierError,
)
from .numkernel import (
    NORM_FLOOR,
    Matrix,
    as_matrix,
    l2_normalize,
    l2_normalize_backward,
    softmax,
    softmax_backward,
)

logger = logging.getLogger(__name__)

#: Floor applied to the denominator distribution inside KL logs.
KL_FLOOR = 1e-12
#: Lower bound of per-dimension standard deviations when restoring.
STD_EPS = 1e-6

COMPONENTS = ('bca', 'bcr', 'af', 'dc')


@dataclass(frozen=True)
class LossWeights:
    """Weights of the alignment, relation, anti-forgetting and
    direction-consistency terms."""

    mu1: float = 100.0
    mu2: float = 1.0
    mu3: float = 7e-2
    mu4: float = 5e-4

    def __post_init__(self):
        for name in ('mu1', 'mu2', 'mu3', 'mu4'):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ImproperlyConfigured(
                    f'loss weight {name} must be finite and >= 0, '
                    f'got {value}')

    def of(self, component: str) -> float:
        return {'bca': self.mu1, 'bcr': self.mu2,
                'af': self.mu3, 'dc': self.mu4}[component]


@dataclass(frozen=True)
class DomainStatistics:
    """Per-dimension mean and standard deviation of a feature space."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise DimensionError(
                f'mean {self.mean.shape} and std {self.std.shape} differ')
        if np.any(self.std < 0):
            raise ValueError('standard deviations must be >= 0')

    @classmethod
    def from_features(cls, features) -> 'DomainStatistics':
        """Population statistics over the rows of ``features``."""
        features = as_matrix(features)
        if features.ndim != 2 or features.shape[0] < 2:
            raise InsufficientDataError(
                'domain statistics need at least 2 samples, '
                f'got {features.shape[0] if features.ndim else 0}')
        return cls(features.mean(axis=0), features.std(axis=0))

    @classmethod
    def neutral(cls, channels: int) -> 'DomainStatistics':
        return cls(np.zeros(channels), np.ones(channels))

    def restore(self, z_tilde: Matrix) -> Matrix:
        return z_tilde * self.effective_std + self.mean

    @property
    def effective_std(self) -> np.ndarray:
        return np.maximum(self.std, STD_EPS)


class Classifier(Protocol):
    """What the anti-forgetting term needs from an identity classifier."""

    num_classes: int

    def logits(self, x: Matrix) -> Matrix:
        ...

    def logits_input_grad(self, dlogits: Matrix) -> Matrix:
        ...


@dataclass(frozen=True)
class MaskedAffinity:
    """Affinity rows with same-identity entries removed.

    ``values[i, j]`` is 0 exactly where ``ids[i] == ids[j]``.
    """

    values: np.ndarray
    ids: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        """True where the pair belongs to different identities."""
        ids = np.asarray(self.ids)
        return ids[:, None] != ids[None, :]

    @property
    def excluded_rows(self) -> np.ndarray:
        return ~self.mask.any(axis=1)


def _check_pair(a: Matrix, b: Matrix):
    if a.shape != b.shape:
        raise DimensionError(f'shape mismatch: {a.shape} vs {b.shape}')


def alignment_loss(z_new, z_trans) -> float:
    """Mean squared distance between the normalized rows."""
    z_new, z_trans = as_matrix(z_new), as_matrix(z_trans)
    _check_pair(z_new, z_trans)
    diff = l2_normalize(z_new) - l2_normalize(z_trans)
    return float(np.sum(diff * diff) / z_new.shape[0])


def _alignment_grad(target: Matrix, z_trans: Matrix) -> Tuple[float, Matrix]:
    t = l2_normalize(target)
    y = l2_normalize(z_trans)
    rows = z_trans.shape[0]
    diff = y - t
    value = float(np.sum(diff * diff) / rows)
    return value, l2_normalize_backward(z_trans, y, 2.0 * diff / rows)


def affinity(z) -> Matrix:
    """Row-wise softmax over pairwise cosine similarities (diagonal kept)."""
    z = as_matrix(z)
    if z.ndim != 2 or z.shape[0] < 2:
        raise InsufficientBatchError(
            f'affinity needs at least 2 rows, got shape {z.shape}')
    y = l2_normalize(z)
    return softmax(y @ y.T)


def _denominator_support(ids, renormalize: bool) -> np.ndarray:
    ids = np.asarray(ids)
    if renormalize:
        return (ids[:, None] != ids[None, :]).astype(np.float64)
    support = np.ones((ids.size, ids.size))
    np.fill_diagonal(support, 0.0)
    return support


def mask_normalize(m, ids, renormalize=False) -> MaskedAffinity:
    """Zero same-identity entries and rescale the rest of each row.

    The denominator sums every entry except the diagonal. With
    ``renormalize`` it sums only the kept entries, so rows that keep
    anything sum to one. Rows with nothing kept stay all zero.
    """
    m = as_matrix(m)
    ids = np.asarray(ids)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] != ids.size:
        raise DimensionError(
            f'affinity {m.shape} does not match {ids.size} labels')
    keep = (ids[:, None] != ids[None, :]).astype(np.float64)
    den = np.sum(_denominator_support(ids, renormalize) * m, axis=1,
                 keepdims=True)
    safe = np.where(den > 0, den, 1.0)
    return MaskedAffinity(keep * m / safe, ids)


def _kl_rows(p: Matrix, q: Matrix, mask: np.ndarray) -> np.ndarray:
    """``sum_j p log(p / max(q, floor))`` over kept entries with p > 0."""
    active = mask & (p > 0)
    q_floor = np.maximum(q, KL_FLOOR)
    terms = np.where(
        active, special.xlogy(p, p) - special.xlogy(p, q_floor), 0.0)
    return terms.sum(axis=1)


def relation_loss(m_old: MaskedAffinity, m_new: MaskedAffinity) -> float:
    """KL from the old relations to the new ones, averaged over all rows.

    Excluded rows count in the ``1/B`` average but contribute nothing.
    """
    p, q = as_matrix(m_old.values), as_matrix(m_new.values)
    _check_pair(p, q)
    if not np.array_equal(m_old.mask, m_new.mask):
        raise MaskPatternError('masked affinities use different identities')
    return float(_kl_rows(p, q, m_old.mask).sum() / p.shape[0])


def _relation_grad(source: Matrix, z_trans: Matrix, ids,
                   renormalize: bool) -> Tuple[float, Matrix]:
    rows = z_trans.shape[0]
    p = mask_normalize(affinity(source), ids, renormalize)
    y = l2_normalize(z_trans)
    m = softmax(y @ y.T)
    keep = p.mask
    support = _denominator_support(ids, renormalize)
    den = np.sum(support * m, axis=1, keepdims=True)
    den = np.where(den > 0, den, 1.0)
    q = keep * m / den
    value = float(_kl_rows(p.values, q, keep).sum() / rows)

    active = keep & (p.values > 0) & (q >= KL_FLOOR)
    dq = np.where(active, -p.values / np.where(active, q, 1.0), 0.0) / rows
    dm = keep * dq / den - support * np.sum(dq * q, axis=1,
                                            keepdims=True) / den
    ds = softmax_backward(m, dm)
    dy = (ds + ds.T) @ y
    return value, l2_normalize_backward(z_trans, y, dy)


def anti_forget_logits(classifier: Classifier, z_old, z_trans,
                       stats: DomainStatistics) -> Tuple[Matrix, Matrix]:
    """Identity posteriors of the source features and of the transferred
    features restored into the source statistics."""
    if getattr(classifier, 'num_classes', 0) == 0:
        raise NoOldClassifierError('no source identities to distil from')
    z_old, z_trans = as_matrix(z_old), as_matrix(z_trans)
    _check_pair(z_old, z_trans)
    q = softmax(classifier.logits(z_old))
    q_hat = softmax(classifier.logits(stats.restore(l2_normalize(z_trans))))
    return q, q_hat


def anti_forget_loss(q, q_hat) -> float:
    """Mean row KL ``KL(q || q_hat)``."""
    q, q_hat = as_matrix(q), as_matrix(q_hat)
    _check_pair(q, q_hat)
    q_hat = np.maximum(q_hat, np.finfo(np.float64).tiny)
    return float(special.rel_entr(q, q_hat).sum() / q.shape[0])


def _anti_forget_grad(classifier: Classifier, source: Matrix,
                      z_trans: Matrix,
                      stats: DomainStatistics) -> Tuple[float, Matrix]:
    if getattr(classifier, 'num_classes', 0) == 0:
        raise NoOldClassifierError('no source identities to distil from')
    rows = z_trans.shape[0]
    q = softmax(classifier.logits(source))
    y = l2_normalize(z_trans)
    log_q_hat = special.log_softmax(classifier.logits(stats.restore(y)),
                                    axis=1)
    value = float(np.sum(special.xlogy(q, q) - q * log_q_hat) / rows)
    dlogits = (np.exp(log_q_hat) - q) / rows
    dy = classifier.logits_input_grad(dlogits) * stats.effective_std
    return value, l2_normalize_backward(z_trans, y, dy)


def _direction_parts(z_trans: Matrix, z_old: Matrix, z_new: Matrix):
    y = l2_normalize(z_trans)
    s = l2_normalize(z_old)
    t = l2_normalize(z_new)
    d = y - s
    e = t - s
    d_norm = np.linalg.norm(d, axis=1, keepdims=True)
    e_norm = np.linalg.norm(e, axis=1, keepdims=True)
    valid = ((d_norm > NORM_FLOOR) & (e_norm > NORM_FLOOR)).ravel()
    u = d / np.where(d_norm > NORM_FLOOR, d_norm, 1.0)
    v = e / np.where(e_norm > NORM_FLOOR, e_norm, 1.0)
    return y, u, v, d_norm, valid


def direction_consistency_loss(z_trans, z_old, z_new) -> float:
    """Mean ``1 - cos`` between the transfer move and the model move.

    Rows where either move has zero length contribute 0; if every row is
    like that the loss is 0 and a :class:`DegenerateBatchWarning` is issued.
    """
    z_trans, z_old, z_new = (as_matrix(z_trans), as_matrix(z_old),
                             as_matrix(z_new))
    _check_pair(z_trans, z_old)
    _check_pair(z_old, z_new)
    _, u, v, _, valid = _direction_parts(z_trans, z_old, z_new)
    if not valid.any():
        warnings.warn('every row of the batch has a zero-length move',
                      DegenerateBatchWarning, stacklevel=2)
        return 0.0
    terms = 1.0 - np.sum(u * v, axis=1)
    return float(np.sum(terms[valid]) / z_trans.shape[0])


def _direction_grad(z_trans: Matrix, z_old: Matrix,
                    z_new: Matrix) -> Tuple[float, Matrix]:
    rows = z_trans.shape[0]
    y, u, v, d_norm, valid = _direction_parts(z_trans, z_old, z_new)
    if not valid.any():
        warnings.warn('every row of the batch has a zero-length move',
                      DegenerateBatchWarning, stacklevel=3)
        return 0.0, np.zeros_like(z_trans)
    terms = 1.0 - np.sum(u * v, axis=1)
    value = float(np.sum(terms[valid]) / rows)
    du = np.where(valid[:, None], -v / rows, 0.0)
    safe = np.where(d_norm > NORM_FLOOR, d_norm, 1.0)
    dd = (du - u * np.sum(u * du, axis=1, keepdims=True)) / safe
    return value, l2_normalize_backward(z_trans, y, dd)


@dataclass
class DirectionBatch:
    """One transfer direction over one mini-batch.

    ``source`` is what the network consumes, ``target`` what its output
    should become; ``classifier`` and ``stats`` belong to the source space.
    """

    network: object
    source: np.ndarray
    target: np.ndarray
    ids: np.ndarray
    classifier: Classifier
    stats: DomainStatistics


@dataclass
class ObjectiveContext:
    """Everything the objective needs for one training step."""

    forward: DirectionBatch
    backward: Optional[DirectionBatch] = None
    weights: LossWeights = field(default_factory=LossWeights)
    use_bcd: bool = True
    use_bad: bool = True
    renormalize_masked_rows: bool = False

    @property
    def directions(self):
        if self.backward is None:
            return (self.forward,)
        return (self.forward, self.backward)

    def active(self, component: str) -> bool:
        if component in ('bca', 'bcr'):
            return self.use_bcd
        return self.use_bad


@dataclass
class ObjectiveResult:
    value: float
    components: Dict[str, float]


def _direction_terms(ctx: ObjectiveContext, batch: DirectionBatch,
                     z_trans: Matrix) -> Dict[str, Tuple[float, Matrix]]:
    terms = {}
    if ctx.use_bcd:
        terms['bca'] = _alignment_grad(batch.target, z_trans)
        terms['bcr'] = _relation_grad(batch.source, z_trans, batch.ids,
                                      ctx.renormalize_masked_rows)
    if ctx.use_bad:
        terms['af'] = _anti_forget_grad(batch.classifier, batch.source,
                                        z_trans, batch.stats)
        terms['dc'] = _direction_grad(z_trans, batch.source, batch.target)
    return terms


def _evaluate(ctx: ObjectiveContext, backprop: bool) -> ObjectiveResult:
    share = 1.0 / len(ctx.directions)
    components = {name: 0.0 for name in COMPONENTS}
    for batch in ctx.directions:
        z_trans = batch.network.forward(batch.source)
        terms = _direction_terms(ctx, batch, z_trans)
        grad = np.zeros_like(z_trans)
        for name, (value, dz) in terms.items():
            components[name] += share * value
            grad += (share * ctx.weights.of(name)) * dz
        if backprop:
            batch.network.backward(grad)
    value = sum(ctx.weights.of(name) * components[name]
                for name in COMPONENTS if ctx.active(name))
    return ObjectiveResult(float(value), components)


def bcd_loss(ctx: ObjectiveContext) -> float:
    """Weighted compatible-distillation part, averaged over directions."""
    if not ctx.use_bcd:
        return 0.0
    parts = _evaluate(ctx, backprop=False).components
    return ctx.weights.mu1 * parts['bca'] + ctx.weights.mu2 * parts['bcr']


def bad_loss(ctx: ObjectiveContext) -> float:
    """Weighted anti-forgetting part, averaged over directions."""
    if not ctx.use_bad:
        return 0.0
    parts = _evaluate(ctx, backprop=False).components
    return ctx.weights.mu3 * parts['af'] + ctx.weights.mu4 * parts['dc']


def total_objective(ctx: ObjectiveContext) -> float:
    return _evaluate(ctx, backprop=False).value


def objective_and_backward(ctx: ObjectiveContext) -> ObjectiveResult:
    """Evaluate the objective and accumulate its gradient into the
    transfer networks. Zero their gradients first."""
    result = _evaluate(ctx, backprop=True)
    if not np.isfinite(result.value):
        logger.warning('objective is not finite: %r', result.components)
    return result
