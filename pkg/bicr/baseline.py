# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Per-stage metric learner standing in for the lifelong backbone.

An MLP embedder is fine-tuned every stage with identity cross-entropy plus
a batch-hard triplet loss. Classifier heads cover the identities of their
own stage only. Frozen copies of a stage's models are kept as
:class:`StageSnapshot` objects.
"""

import copy
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import special

from .exceptions import (
    InsufficientDataError,
    TrainingDivergedError,
    UnlearnableSplitError,
)
from .losses import DomainStatistics
from .numkernel import (
    AffineLayer,
    Matrix,
    Module,
    Parameter,
    PReLU,
    SgdConfig,
    Sequential,
    as_matrix,
    l2_normalize,
    l2_normalize_backward,
    sgd_step,
)
from .synthdata import SampleSet, sample_batch

logger = logging.getLogger(__name__)

#: Rows embedded per chunk at inference time.
EMBED_CHUNK = 4096


class Embedder(Sequential):
    """``raw -> hidden -> ... -> C`` MLP with PReLU activations.

    ``depth`` counts affine layers, so the default of 3 is
    ``D -> H -> H -> C``.
    """

    def __init__(self, raw_dim: int, hidden_dim: int, embed_dim: int,
                 rng: np.random.Generator, depth=3):
        if depth < 2:
            raise ValueError(f'depth must be >= 2, got {depth}')
        widths = [raw_dim] + [hidden_dim] * (depth - 1) + [embed_dim]
        layers: List[Module] = []
        for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(AffineLayer(w_in, w_out, rng, name=f'embed.{i}'))
            if i < depth - 1:
                layers.append(PReLU(w_out, name=f'embed.{i}.act'))
        super().__init__(*layers)
        self.raw_dim = raw_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.depth = depth

    @classmethod
    def deep(cls, raw_dim: int, embed_dim: int, rng: np.random.Generator,
             hidden_dim=512, hidden_layers=8) -> 'Embedder':
        """The heavy profile used to price re-extraction."""
        return cls(raw_dim, hidden_dim, embed_dim, rng,
                   depth=hidden_layers + 1)

    def embed(self, x) -> Matrix:
        """Normalized features of raw inputs, computed in chunks."""
        x = as_matrix(x)
        out = [l2_normalize(self.forward(x[i:i + EMBED_CHUNK]))
               for i in range(0, x.shape[0], EMBED_CHUNK)]
        if not out:
            return np.zeros((0, self.embed_dim))
        return np.concatenate(out)

    def same_architecture(self, other: 'Embedder') -> bool:
        mine = [(n, p.shape) for n, p in self.named_parameters()]
        theirs = [(n, p.shape) for n, p in other.named_parameters()]
        return mine == theirs


class ClassifierHead(Module):
    """Affine identity classifier over ``logit_scale``-scaled features.

    Column ``k`` scores identity ``classes[k]``.
    """

    def __init__(self, embed_dim: int, classes, rng: np.random.Generator,
                 logit_scale=10.0):
        self.classes = np.asarray(classes, dtype=np.int64)
        self.affine = AffineLayer(embed_dim, self.classes.size, rng,
                                  name='classifier')
        self.logit_scale = float(logit_scale)

    @property
    def num_classes(self) -> int:
        return int(self.classes.size)

    @property
    def weight(self) -> Parameter:
        return self.affine.weight

    def logits(self, x: Matrix) -> Matrix:
        """Logits without touching the training cache."""
        return self.logit_scale * (x @ self.affine.weight.value.T) \
            + self.affine.bias.value

    def logits_input_grad(self, dlogits: Matrix) -> Matrix:
        return self.logit_scale * (dlogits @ self.affine.weight.value)

    def forward(self, x: Matrix) -> Matrix:
        return self.affine.forward(self.logit_scale * x)

    __call__ = forward

    def backward(self, dlogits: Matrix) -> Matrix:
        return self.logit_scale * self.affine.backward(dlogits)

    def targets(self, labels) -> np.ndarray:
        """Column index of every label."""
        index = {label: k for k, label in enumerate(self.classes.tolist())}
        return np.array([index[int(label)] for label in labels])


@dataclass(frozen=True)
class StageSnapshot:
    """Frozen models and source statistics of a closed stage."""

    embedder: Embedder
    classifier: ClassifierHead
    stats: DomainStatistics
    stage: int


def snapshot_freeze(embedder: Embedder, classifier: ClassifierHead,
                    stats: DomainStatistics, stage: int) -> StageSnapshot:
    """Deep copy the models into an immutable snapshot in eval mode."""
    frozen_embedder = copy.deepcopy(embedder).eval()
    frozen_classifier = copy.deepcopy(classifier).eval()
    for param in frozen_embedder.parameters() + frozen_classifier.parameters():
        param.value.setflags(write=False)
    return StageSnapshot(frozen_embedder, frozen_classifier, stats, stage)


def compute_domain_stats(embedder: Embedder, data) -> DomainStatistics:
    """Per-dimension statistics of the normalized features of ``data``."""
    x = data.x if isinstance(data, SampleSet) else as_matrix(data)
    if x.shape[0] < 2:
        raise InsufficientDataError(
            f'domain statistics need at least 2 samples, got {x.shape[0]}')
    return DomainStatistics.from_features(embedder.embed(x))


def cross_entropy(logits: Matrix, targets: np.ndarray) -> Tuple[float,
                                                                Matrix]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    rows = logits.shape[0]
    log_p = special.log_softmax(logits, axis=1)
    value = -float(np.mean(log_p[np.arange(rows), targets]))
    grad = np.exp(log_p)
    grad[np.arange(rows), targets] -= 1.0
    return value, grad / rows


def batch_hard_triplet_loss(features: Matrix, labels,
                            margin=0.3) -> Tuple[float, Matrix]:
    """Batch-hard triplet loss over Euclidean distances between rows.

    Anchors without a positive in the batch are skipped; the mean runs over
    all rows.
    """
    rows = features.shape[0]
    labels = np.asarray(labels)
    diff = features[:, None, :] - features[None, :, :]
    dist = np.sqrt(np.maximum(np.sum(diff * diff, axis=2), 0.0))
    same = labels[:, None] == labels[None, :]
    eye = np.eye(rows, dtype=bool)
    positive = same & ~eye
    negative = ~same
    has_pair = positive.any(axis=1) & negative.any(axis=1)

    hardest_pos = np.argmax(np.where(positive, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(negative, dist, np.inf), axis=1)
    idx = np.arange(rows)
    hinge = dist[idx, hardest_pos] - dist[idx, hardest_neg] + margin
    active = has_pair & (hinge > 0)
    value = float(np.sum(np.where(active, hinge, 0.0)) / rows)

    grad = np.zeros_like(features)
    for i in np.flatnonzero(active):
        for j, sign in ((hardest_pos[i], 1.0), (hardest_neg[i], -1.0)):
            if dist[i, j] > 0:
                step = sign * diff[i, j] / (dist[i, j] * rows)
                grad[i] += step
                grad[j] -= step
    return value, grad


def _fresh_embedder(raw_dim, hidden_dim, embed_dim, depth, rng):
    return Embedder(raw_dim, hidden_dim, embed_dim, rng, depth=depth)


def train_stage_embedder(init: Optional[Embedder], data: SampleSet,
                         epochs: int, rng: np.random.Generator,
                         sgd: SgdConfig, hidden_dim=128, embed_dim=32,
                         depth=3, ids_per_batch=16, samples_per_id=4,
                         margin=0.3, logit_scale=10.0
                         ) -> Tuple[Embedder, ClassifierHead]:
    """Fine-tune ``init`` (or a fresh embedder) on one training split.

    An epoch visits ``ceil(identities / ids_per_batch)`` PK batches.
    ``init`` itself is never modified.
    """
    counts = data.counts()
    if len(counts) < 2:
        raise UnlearnableSplitError(
            f'stage {data.stage}: need >= 2 identities, got {len(counts)}')
    if min(counts.values()) < 2:
        raise UnlearnableSplitError(
            f'stage {data.stage}: every identity needs >= 2 samples')

    if init is None:
        embedder = _fresh_embedder(data.x.shape[1], hidden_dim, embed_dim,
                                   depth, rng)
    else:
        embedder = copy.deepcopy(init)
        for param in embedder.parameters():
            param.value.setflags(write=True)
            param.velocity = None
    classifier = ClassifierHead(embedder.embed_dim, sorted(counts), rng,
                                logit_scale=logit_scale)
    if epochs == 0:
        return embedder, classifier

    per_batch = min(ids_per_batch, len(counts))
    per_id = min(samples_per_id, min(counts.values()))
    steps = -(-len(counts) // per_batch)
    params = embedder.parameters() + classifier.parameters()
    embedder.train()
    classifier.train()
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps):
            batch = sample_batch(data, per_batch, per_id, rng)
            for param in params:
                param.zero_grad()
            raw = embedder.forward(batch.x)
            feats = l2_normalize(raw)
            ce, dlogits = cross_entropy(classifier.forward(feats),
                                        classifier.targets(batch.y))
            triplet, dfeats = batch_hard_triplet_loss(feats, batch.y, margin)
            loss = ce + triplet
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f'stage {data.stage}: baseline loss is {loss} '
                    f'at epoch {epoch}')
            dfeats = dfeats + classifier.backward(dlogits)
            embedder.backward(l2_normalize_backward(raw, feats, dfeats))
            sgd_step(params, sgd, epoch)
            total += loss
        logger.debug('stage %d baseline epoch %d: loss %.5f',
                     data.stage, epoch, total / steps)
    embedder.eval()
    classifier.eval()
    return embedder, classifier
