# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Gradient checks and the feature-update benchmark.

Gradient checks compare back-propagated gradients with central differences
on small fp64 networks. Components:

``kernel``
    affine, batch-norm and PReLU layers under a normalized squared error.
``bict``
    the four-block transfer network under a linear read-out.
``bcd`` / ``bad``
    the compatible-distillation or anti-forgetting terms through both
    directions.
``total``
    the complete weighted objective.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baseline import ClassifierHead, Embedder
from .bict import BiCTNetwork
from .gallery import GalleryStore
from .losses import (
    DirectionBatch,
    DomainStatistics,
    LossWeights,
    ObjectiveContext,
    objective_and_backward,
    total_objective,
)
from .numkernel import (
    AffineLayer,
    BatchNorm,
    PReLU,
    Sequential,
    finite_diff_check,
    l2_normalize,
    l2_normalize_backward,
    make_rng,
)

logger = logging.getLogger(__name__)

GRADCHECK_KEY = 4
BENCH_KEY = 5

GRADCHECK_COMPONENTS = ('kernel', 'bict', 'bcd', 'bad', 'total')
#: Largest accepted relative error.
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-5
GRADCHECK_FLOOR = 1e-8
#: Coordinates drawn per parameter tensor; smaller tensors are checked whole.
GRADCHECK_COORDS = 8

# Case sizes: C channels, P prototypes, C0 bottleneck, ids x per-id rows.
_CHANNELS = 8
_PROTOTYPES = 4
_BOTTLENECK = 4
_IDS = 3
_PER_ID = 2


@dataclass
class GradcheckReport:
    seeds: List[int]
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.errors.values())

    def to_dict(self) -> Dict:
        return {'seeds': self.seeds, 'tolerance': self.tolerance,
                'max_rel_err': self.errors,
                'verdict': 'pass' if self.passed else 'fail'}


def _kernel_case(rng):
    net = Sequential(AffineLayer(_CHANNELS, 6, rng, name='a', bias=False),
                     BatchNorm(6, name='bn'), PReLU(6, name='act'),
                     AffineLayer(6, _CHANNELS, rng, name='b'))
    x = rng.normal(size=(_IDS * _PER_ID, _CHANNELS))
    target = l2_normalize(rng.normal(size=x.shape))

    def objective(backprop=False):
        raw = net.forward(x)
        y = l2_normalize(raw)
        diff = y - target
        if backprop:
            net.backward(l2_normalize_backward(raw, y, diff))
        return 0.5 * float(np.sum(diff * diff))

    return net.parameters(), objective


def _small_network(rng, direction):
    return BiCTNetwork(_CHANNELS, rng, prototypes=_PROTOTYPES,
                       bottleneck=_BOTTLENECK, direction=direction)


def _bict_case(rng):
    net = _small_network(rng, 'forward')
    z = l2_normalize(rng.normal(size=(_IDS * _PER_ID, _CHANNELS)))
    readout = rng.normal(size=z.shape)

    def objective(backprop=False):
        out = net.forward(z)
        if backprop:
            net.backward(readout)
        return float(np.sum(readout * out))

    return net.parameters(), objective


def _objective_case(rng, use_bcd, use_bad):
    rows = _IDS * _PER_ID
    ids = np.repeat(np.arange(_IDS), _PER_ID)
    z_old = l2_normalize(rng.normal(size=(rows, _CHANNELS)))
    z_new = l2_normalize(z_old + 0.5 * rng.normal(size=z_old.shape))
    old_head = ClassifierHead(_CHANNELS, np.arange(_IDS), rng)
    new_head = ClassifierHead(_CHANNELS, np.arange(_IDS), rng)
    fwd = _small_network(rng, 'forward')
    bwd = _small_network(rng, 'backward')
    ctx = ObjectiveContext(
        forward=DirectionBatch(fwd, z_old, z_new, ids, old_head,
                               DomainStatistics.from_features(z_old)),
        backward=DirectionBatch(bwd, z_new, z_old, ids, new_head,
                                DomainStatistics.from_features(z_new)),
        # unit weights keep every term visible to the check
        weights=LossWeights(mu1=1.0, mu2=1.0, mu3=1.0, mu4=1.0),
        use_bcd=use_bcd, use_bad=use_bad)

    def objective(backprop=False):
        if backprop:
            return objective_and_backward(ctx).value
        return total_objective(ctx)

    return fwd.parameters() + bwd.parameters(), objective


def _case(component: str, rng):
    if component == 'kernel':
        return _kernel_case(rng)
    if component == 'bict':
        return _bict_case(rng)
    if component == 'bcd':
        return _objective_case(rng, use_bcd=True, use_bad=False)
    if component == 'bad':
        return _objective_case(rng, use_bcd=False, use_bad=True)
    if component == 'total':
        return _objective_case(rng, use_bcd=True, use_bad=True)
    raise ValueError(f'unknown gradcheck component {component!r}')


def gradcheck_component(component: str, seed: int,
                        coords_per_param=GRADCHECK_COORDS,
                        inject_bug=False) -> float:
    """Max relative error of one component for one seed.

    ``inject_bug`` perturbs the analytic gradient so the check must fail.
    """
    rng = make_rng(seed, GRADCHECK_KEY, GRADCHECK_COMPONENTS.index(component))
    params, objective = _case(component, rng)
    for param in params:
        param.zero_grad()
    objective(backprop=True)
    if inject_bug:
        params[0].grad *= 1.01
        params[0].grad += 1e-3
    return finite_diff_check(objective, params, h=GRADCHECK_STEP,
                             max_coords_per_param=coords_per_param, rng=rng,
                             floor=GRADCHECK_FLOOR)


def run_gradcheck(seeds: Sequence[int],
                  components: Sequence[str] = GRADCHECK_COMPONENTS,
                  coords_per_param=GRADCHECK_COORDS,
                  inject_bug=False) -> GradcheckReport:
    report = GradcheckReport(list(seeds))
    for component in components:
        worst = max(gradcheck_component(component, seed, coords_per_param,
                                        inject_bug)
                    for seed in seeds)
        report.errors[component] = worst
        logger.info('gradcheck %s: max relative error %.3g', component,
                    worst)
    return report


@dataclass
class BenchReport:
    n: int
    update_seconds: float
    reextract_seconds: float
    transfer_parameters: int
    backbone_parameters: int

    @property
    def speedup(self) -> float:
        return self.reextract_seconds / max(self.update_seconds, 1e-12)

    def to_dict(self) -> Dict:
        return {'n': self.n, 'update_seconds': self.update_seconds,
                'reextract_seconds': self.reextract_seconds,
                'speedup': self.speedup,
                'transfer_parameters': self.transfer_parameters,
                'backbone_parameters': self.backbone_parameters}


def bench_update(n=10000, seed=0, raw_dim=48, embed_dim=32, hidden_dim=512,
                 hidden_layers=8, prototypes=16, bottleneck=32,
                 repeats: Optional[int] = None) -> BenchReport:
    """Time ``update_all`` against re-embedding ``n`` raw inputs.

    Each side keeps its fastest of ``repeats`` runs (3 by default, 1 for
    ``n < 1000``).
    """
    rng = make_rng(seed, BENCH_KEY)
    backbone = Embedder.deep(raw_dim, embed_dim, rng, hidden_dim=hidden_dim,
                             hidden_layers=hidden_layers).eval()
    transfer = BiCTNetwork(embed_dim, rng, prototypes=prototypes,
                           bottleneck=bottleneck).eval()
    raws = rng.normal(size=(n, raw_dim))
    features = backbone.embed(raws)
    identities = np.arange(n) % 97
    repeats = repeats or (1 if n < 1000 else 3)

    update, reextract = [], []
    for _ in range(repeats):
        store = GalleryStore(embed_dim)
        store.append_features(features, identities, 1)
        started = time.perf_counter()
        store.update_all(transfer, 0.5, 2)
        update.append(time.perf_counter() - started)

        started = time.perf_counter()
        backbone.embed(raws)
        reextract.append(time.perf_counter() - started)

    report = BenchReport(n, min(update), min(reextract),
                         transfer.parameter_count(),
                         backbone.parameter_count())
    logger.info('bench n=%d: update %.4fs, re-extraction %.4fs (x%.1f)',
                n, report.update_seconds, report.reextract_seconds,
                report.speedup)
    return report
