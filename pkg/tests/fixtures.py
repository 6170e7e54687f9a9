# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

import dataclasses

import numpy as np

from bicr.baseline import ClassifierHead
from bicr.bict import BiCTNetwork
from bicr.config import (
    ExperimentConfig,
    FusionConfig,
    ModelConfig,
    StreamConfig,
    TrainingConfig,
)
from bicr.losses import DirectionBatch, DomainStatistics, ObjectiveContext
from bicr.numkernel import SgdConfig, l2_normalize


class FakeConfig:
    @classmethod
    def generate_data(cls):
        return dict(STR_VAR='bar',
                    INT_VAR='42',
                    FLOAT_VAR='33.3',
                    FLOAT_EXP_VAR='8e-3',
                    FLOAT_NEGATIVE_VAR='-1.0',
                    BOOL_TRUE_STRING_LIKE_INT='1',
                    BOOL_TRUE_STRING_LIKE_BOOL='True',
                    BOOL_TRUE_STRING_1='on',
                    BOOL_TRUE_STRING_2='ok',
                    BOOL_TRUE_STRING_3='yes',
                    BOOL_TRUE_STRING_4='y',
                    BOOL_TRUE_STRING_5='true',
                    BOOL_TRUE_BOOL=True,
                    BOOL_FALSE_STRING_LIKE_INT='0',
                    BOOL_FALSE_STRING_LIKE_BOOL='False',
                    BOOL_FALSE_BOOL=False,
                    NONE_VAR='none',
                    )


def tiny_config(**changes) -> ExperimentConfig:
    """An experiment that runs three stages in about a second."""
    cfg = ExperimentConfig(
        seed=0,
        stream=StreamConfig(stages=3, ids_per_stage=6, samples_per_id=8,
                            raw_dim=12, severity=1.0, noise_std=0.3,
                            train_fraction=0.5, queries_per_id=2),
        model=ModelConfig(embed_dim=8, hidden_dim=16, depth=2, prototypes=4,
                          bottleneck=4),
        training=TrainingConfig(
            baseline_epochs_first=3, baseline_epochs=2, transfer_epochs=2,
            ids_per_batch=3, samples_per_id=2,
            baseline_sgd=SgdConfig(lr=0.05, decay_epoch=30, momentum=0.9),
            transfer_sgd=SgdConfig(lr=8e-3, decay_epoch=1)),
        fusion=FusionConfig(epsilon_batch=8),
    )
    return dataclasses.replace(cfg, **changes)


def unit_features(rng, rows, channels):
    return l2_normalize(rng.normal(size=(rows, channels)))


def pk_labels(ids, per_id):
    return np.repeat(np.arange(ids), per_id)


def small_network(rng, channels=8, direction='forward', **kwargs):
    kwargs.setdefault('prototypes', 4)
    kwargs.setdefault('bottleneck', 4)
    return BiCTNetwork(channels, rng, direction=direction, **kwargs)


def objective_context(rng, channels=8, ids=3, per_id=2, bidirectional=True,
                      **kwargs) -> ObjectiveContext:
    """Random old/new features with fresh transfer networks and heads."""
    labels = pk_labels(ids, per_id)
    z_old = unit_features(rng, labels.size, channels)
    z_new = l2_normalize(z_old + 0.5 * rng.normal(size=z_old.shape))
    forward = DirectionBatch(
        small_network(rng, channels), z_old, z_new, labels,
        ClassifierHead(channels, np.arange(ids), rng),
        DomainStatistics.from_features(z_old))
    backward = DirectionBatch(
        small_network(rng, channels, 'backward'), z_new, z_old, labels,
        ClassifierHead(channels, np.arange(ids), rng),
        DomainStatistics.from_features(z_new)) if bidirectional else None
    return ObjectiveContext(forward=forward, backward=backward, **kwargs)
