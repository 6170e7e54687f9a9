# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Retrieval metrics and numeric checks of the fusion argument.

Metrics: average precision, rank-1 and average forgetting over a
lifelong run, collected in a :class:`MetricsReport`.

Theory checks:

* error accumulation: with per-stage transfer error factors ``E_c >= 1``,
  a gallery that is only ever transferred accumulates ``E_F = E_b * prod
  E_c``; fusing the un-transferred and transferred features with weight
  ``eps`` never accumulates more (``E_F - E_D >= 0``);
* fusion weights: using one weight for both feature and model fusion
  (``a1 == a2``) minimizes the query/gallery discrepancy
  ``||(a1 - a2) * (F_prev - F_cur)|| + C``.
"""

import csv
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .compat import json, json_dumps
from .exceptions import (
    DimensionError,
    ExcludedQueryWarning,
    StaleStoreError,
    UndefinedMetricError,
)

logger = logging.getLogger(__name__)

METRICS = ('mAP', 'R1')


@dataclass(frozen=True)
class RankEvalCase:
    """One query's identity and the gallery identities in rank order."""

    query_identity: int
    ranked_identities: np.ndarray

    @property
    def relevant(self) -> np.ndarray:
        return np.asarray(self.ranked_identities) == self.query_identity


def average_precision(case: RankEvalCase) -> float:
    """Mean over relevant positions ``k`` of ``hits(top k) / k``.

    :raises UndefinedMetricError: if nothing relevant was ranked.
    """
    relevant = case.relevant
    positions = np.flatnonzero(relevant)
    if positions.size == 0:
        raise UndefinedMetricError(
            f'query {case.query_identity} has no relevant gallery entry')
    hits = np.arange(1, positions.size + 1)
    return float(np.mean(hits / (positions + 1)))


def rank1(case: RankEvalCase) -> float:
    relevant = case.relevant
    if not relevant.any():
        raise UndefinedMetricError(
            f'query {case.query_identity} has no relevant gallery entry')
    return float(relevant[0])


@dataclass(frozen=True)
class StageMetrics:
    mAP: float
    R1: float
    queries: int
    excluded: int


def evaluate_stage(query_model, store, queries: Mapping[int, object],
                   stage: Optional[int] = None) -> Dict[int, StageMetrics]:
    """Score every seen dataset's queries against the whole gallery.

    ``queries`` maps a dataset (its stage) to a sample set with ``x`` and
    ``y``; ``query_model`` needs an ``embed`` method. Queries without a
    relevant gallery entry are excluded and counted.
    """
    if stage is not None and store.current_version != stage:
        raise StaleStoreError(
            f'store is at version {store.current_version}, '
            f'evaluating stage {stage}')
    results = {}
    for dataset in sorted(queries):
        samples = queries[dataset]
        if len(samples) == 0:
            raise UndefinedMetricError(f'dataset {dataset} has no queries')
        ranked = store.rank_identities(query_model.embed(samples.x))
        aps, r1s, excluded = [], [], 0
        for label, row in zip(samples.y.tolist(), ranked):
            case = RankEvalCase(int(label), row)
            if not case.relevant.any():
                excluded += 1
                continue
            aps.append(average_precision(case))
            r1s.append(rank1(case))
        if excluded:
            warnings.warn(
                f'dataset {dataset}: {excluded} queries have no relevant '
                'gallery entry and were excluded',
                ExcludedQueryWarning, stacklevel=2)
            logger.warning('dataset %d: excluded %d queries', dataset,
                           excluded)
        if not aps:
            raise UndefinedMetricError(
                f'dataset {dataset}: no query has a relevant gallery entry')
        results[dataset] = StageMetrics(float(np.mean(aps)),
                                        float(np.mean(r1s)),
                                        len(samples), excluded)
    return results


def average_forgetting(history: Mapping[int, Mapping[int, float]]) -> float:
    """Mean drop from each earlier dataset's peak to its final value.

    ``history[d][t]`` is the performance on dataset ``d`` evaluated after
    stage ``t``. Improvements count as zero drop.
    """
    stages = sorted({t for per_stage in history.values() for t in per_stage})
    if len(stages) < 2:
        raise UndefinedMetricError('forgetting needs at least two stages')
    final = stages[-1]
    drops = []
    for dataset, per_stage in history.items():
        if dataset >= final:
            continue
        earlier = [value for t, value in per_stage.items() if t < final]
        if not earlier or final not in per_stage:
            continue
        drops.append(max(0.0, max(earlier) - per_stage[final]))
    return float(sum(drops) / (len(stages) - 1))


@dataclass
class MetricsReport:
    """Per-dataset, per-stage retrieval metrics of one run."""

    mode: str
    seed: int
    metrics: Dict[Tuple[int, int], Dict[str, float]] = field(
        default_factory=dict)
    epsilon: List[Dict] = field(default_factory=list)
    excluded_queries: int = 0
    runtime: Dict[str, float] = field(default_factory=dict)

    def record(self, stage: int, results: Mapping[int, StageMetrics]):
        for dataset, result in results.items():
            self.metrics[(dataset, stage)] = {'mAP': result.mAP,
                                              'R1': result.R1}
            self.excluded_queries += result.excluded

    @property
    def stages(self) -> List[int]:
        return sorted({t for _, t in self.metrics})

    def history(self, metric: str) -> Dict[int, Dict[int, float]]:
        out: Dict[int, Dict[int, float]] = {}
        for (dataset, stage), values in self.metrics.items():
            out.setdefault(dataset, {})[stage] = values[metric]
        return out

    def forgetting(self) -> Dict[str, Optional[float]]:
        if len(self.stages) < 2:
            return {metric: None for metric in METRICS}
        return {metric: average_forgetting(self.history(metric))
                for metric in METRICS}

    def final_mean(self, metric='mAP') -> float:
        final = self.stages[-1]
        values = [v[metric] for (_, t), v in self.metrics.items()
                  if t == final]
        return float(np.mean(values))

    def to_dict(self, include_runtime=True) -> Dict:
        payload = {
            'mode': self.mode,
            'seed': self.seed,
            'metrics': [
                {'dataset': d, 'stage': t, **values}
                for (d, t), values in sorted(self.metrics.items())
            ],
            'average_forgetting': self.forgetting(),
            'final_mean': {m: self.final_mean(m) for m in METRICS}
            if self.metrics else {},
            'epsilon': self.epsilon,
            'excluded_queries': self.excluded_queries,
        }
        if include_runtime:
            payload['runtime'] = self.runtime
        return payload

    def content_hash(self, extra: Optional[Mapping] = None) -> str:
        """sha256 over the canonical JSON of everything but wall clock."""
        payload = {'report': self.to_dict(include_runtime=False),
                   'extra': dict(extra or {})}
        return hashlib.sha256(
            json_dumps(payload).encode('utf-8')).hexdigest()

    def to_json(self, path, **extra):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump({**self.to_dict(), **extra}, f, indent=2,
                      sort_keys=True)

    def rows(self):
        for (dataset, stage), values in sorted(self.metrics.items()):
            for metric in METRICS:
                yield {'dataset': dataset, 'stage': stage,
                       'metric': metric, 'value': values[metric]}

    def to_csv(self, path):
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(
                f, fieldnames=['dataset', 'stage', 'metric', 'value'])
            writer.writeheader()
            writer.writerows(self.rows())


@dataclass(frozen=True)
class ErrorSimConfig:
    """Error factors of one simulated run.

    ``e_c`` and ``eps`` hold one value per transition, i.e. for stages
    ``2..stages``.
    """

    stages: int
    e_b: float
    e_c: Tuple[float, ...]
    eps: Tuple[float, ...]
    trials: int = 1

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError(f'need at least one stage, got {self.stages}')
        if self.e_b < 0:
            raise ValueError(f'E_b must be >= 0, got {self.e_b}')
        if len(self.e_c) != self.stages - 1 or \
                len(self.eps) != self.stages - 1:
            raise ValueError(
                f'need {self.stages - 1} transition values, got '
                f'{len(self.e_c)} error factors and {len(self.eps)} weights')
        if any(c < 1 for c in self.e_c):
            raise ValueError('error factors must be >= 1')
        if any(not 0 <= e <= 1 for e in self.eps):
            raise ValueError('fusion weights must lie in [0, 1]')


@dataclass(frozen=True)
class ErrorSimResult:
    e_f: np.ndarray
    e_d: np.ndarray

    @property
    def diff(self) -> np.ndarray:
        return self.e_f - self.e_d


def error_accumulation_sim(cfg: ErrorSimConfig) -> ErrorSimResult:
    """Accumulated error per stage of pure transfer and of fusion."""
    e_f = np.empty(cfg.stages)
    e_d = np.empty(cfg.stages)
    e_f[0] = e_d[0] = cfg.e_b
    for i, (c, eps) in enumerate(zip(cfg.e_c, cfg.eps), start=1):
        e_f[i] = c * e_f[i - 1]
        e_d[i] = eps * e_d[i - 1] + (1.0 - eps) * c * e_f[i - 1]
    return ErrorSimResult(e_f, e_d)


def error_gap_closed_form(cfg: ErrorSimConfig) -> np.ndarray:
    """``sum_i (prod_{j>=i} eps_j) (E_c(i) - 1) E_F(i-1)`` per stage."""
    e_f = error_accumulation_sim(cfg).e_f
    gap = np.zeros(cfg.stages)
    for t in range(1, cfg.stages):
        total = 0.0
        for i in range(1, t + 1):
            weight = float(np.prod(cfg.eps[i - 1:t]))
            total += weight * (cfg.e_c[i - 1] - 1.0) * e_f[i - 1]
        gap[t] = total
    return gap


def random_error_config(rng: np.random.Generator, max_stages=8
                        ) -> ErrorSimConfig:
    stages = int(rng.integers(2, max_stages + 1))
    return ErrorSimConfig(
        stages=stages,
        e_b=float(rng.uniform(0.5, 1.5)),
        e_c=tuple(rng.uniform(1.0, 2.0, size=stages - 1).tolist()),
        eps=tuple(rng.uniform(0.0, 1.0, size=stages - 1).tolist()),
    )


@dataclass
class SweepVerdict:
    name: str
    verdict: str
    rows: List[Dict] = field(default_factory=list)
    worst: Optional[float] = None

    @property
    def passed(self) -> bool:
        return self.verdict != 'fail'

    def to_csv(self, path):
        fieldnames = sorted({k for row in self.rows for k in row}) or ['-']
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(self.rows)


def error_sweep(trials: int, rng: np.random.Generator,
                tol=1e-12) -> SweepVerdict:
    """Random configurations; pass when no final gap is below ``-tol``."""
    if trials == 0:
        return SweepVerdict('error_accumulation', 'skipped')
    rows = []
    for trial in range(trials):
        cfg = random_error_config(rng)
        result = error_accumulation_sim(cfg)
        mismatch = float(np.max(np.abs(
            result.diff - error_gap_closed_form(cfg))))
        rows.append({'trial': trial, 'stages': cfg.stages, 'e_b': cfg.e_b,
                     'gap': float(result.diff[-1]),
                     'min_gap': float(result.diff.min()),
                     'closed_form_mismatch': mismatch})
    worst = min(row['min_gap'] for row in rows)
    mismatch = max(row['closed_form_mismatch'] for row in rows)
    if mismatch > 1e-9:
        logger.warning('recursion and closed form differ by %.3g', mismatch)
    verdict = 'pass' if worst >= -tol and mismatch <= 1e-9 else 'fail'
    return SweepVerdict('error_accumulation', verdict, rows, worst)


@dataclass(frozen=True)
class FusionSurface:
    alphas: np.ndarray
    values: np.ndarray
    c_t: float

    @property
    def minimum(self) -> float:
        return float(self.values.min())

    def argmin_set(self, tol=1e-12) -> List[Tuple[int, int]]:
        hits = np.argwhere(self.values <= self.minimum + tol)
        return [(int(i), int(j)) for i, j in hits]

    def argmin_on_diagonal(self, tol=1e-12) -> bool:
        found = self.argmin_set(tol)
        return bool(found) and all(
            abs(self.alphas[i] - self.alphas[j]) <= tol for i, j in found)


def fusion_grid_sim(alpha_grid, pairs: Sequence[Tuple[np.ndarray,
                                                      np.ndarray]],
                    c_t=0.0) -> FusionSurface:
    """Mean discrepancy over ``pairs`` for every ``(a1, a2)`` grid point.

    Each point scores ``||(a1 - a2) prev + (a2 - a1) cur|| + c_t`` with the
    l2 norm taken over the flattened features.
    """
    alphas = np.asarray(alpha_grid, dtype=np.float64)
    if np.any((alphas < 0) | (alphas > 1)):
        raise ValueError('fusion weights must lie in [0, 1]')
    a1 = alphas[:, None, None]
    a2 = alphas[None, :, None]
    total = np.zeros((alphas.size, alphas.size))
    for prev, cur in pairs:
        prev = np.asarray(prev, dtype=np.float64).ravel()
        cur = np.asarray(cur, dtype=np.float64).ravel()
        if prev.shape != cur.shape:
            raise DimensionError(
                f'feature pair shapes differ: {prev.shape} vs {cur.shape}')
        mixed = (a1 - a2) * prev + (a2 - a1) * cur
        total += np.linalg.norm(mixed, axis=-1)
    values = (total / len(pairs) if len(pairs) else total) + c_t
    return FusionSurface(alphas, values, float(c_t))


def fusion_sweep(trials: int, rng: np.random.Generator, grid_size=21,
                 dim=32, rows=8, tol=1e-12) -> SweepVerdict:
    """Random feature pairs; pass when every argmin sits on the diagonal."""
    if trials == 0:
        return SweepVerdict('fusion_weights', 'skipped')
    alphas = np.linspace(0.0, 1.0, grid_size)
    out = []
    for trial in range(trials):
        pair = (rng.normal(size=(rows, dim)), rng.normal(size=(rows, dim)))
        c_t = float(rng.uniform(0.0, 1.0))
        surface = fusion_grid_sim(alphas, [pair], c_t)
        out.append({'trial': trial, 'c_t': c_t,
                    'minimum': surface.minimum,
                    'argmin_points': len(surface.argmin_set(tol)),
                    'on_diagonal': surface.argmin_on_diagonal(tol),
                    'below_c_t': surface.minimum < c_t - tol})
    ok = all(row['on_diagonal'] and not row['below_c_t'] for row in out)
    return SweepVerdict('fusion_weights', 'pass' if ok else 'fail', out,
                        min(row['minimum'] - row['c_t'] for row in out))
