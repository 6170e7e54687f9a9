# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Stage orchestration of a lifelong retrieval run.

Per stage ``t`` a run trains the baseline embedder, trains the forward and
backward transfer networks, measures the knowledge change ``epsilon``
between the previous and the new model, fuses both models with it and
upgrades the gallery. Four modes share this skeleton:

``rfl``
    historical features are transferred and fused; gallery raws are
    dropped when their stage closes.
``reindex``
    same training, but the whole gallery is re-extracted from retained raws.
``frozen``
    historical features stay as they are.
``joint``
    one embedder is trained on every training split seen so far and the
    whole gallery is re-extracted with it.
"""

import copy
import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .baseline import (
    ClassifierHead,
    Embedder,
    StageSnapshot,
    compute_domain_stats,
    snapshot_freeze,
    train_stage_embedder,
)
from .bict import BiCTNetwork
from .config import ExperimentConfig, TrainingConfig, report_config
from .evaltheory import MetricsReport, evaluate_stage
from .exceptions import (
    ArchitectureMismatchError,
    EpsilonUndefinedError,
    ImproperlyConfigured,
    PrivacyViolationError,
    ProtocolError,
    TrainingDivergedError,
)
from .gallery import GalleryStore
from .losses import (
    COMPONENTS,
    DirectionBatch,
    DomainStatistics,
    LossWeights,
    ObjectiveContext,
    affinity,
    objective_and_backward,
)
from .numkernel import make_rng, sgd_step
from .synthdata import SampleSet, StageData, make_stream, sample_batch

logger = logging.getLogger(__name__)

# Substream keys of make_rng(seed, key, stage).
STREAM_KEY = 1
BASELINE_KEY = 2
TRANSFER_KEY = 3


class RawInputVault:
    """Raw gallery inputs per stage with a closed-stage read counter.

    Without ``retain`` the raws of a stage are dropped when it closes and
    reading them afterwards raises :class:`PrivacyViolationError`.
    """

    def __init__(self, retain: bool):
        self.retain = retain
        self._raws: Dict[int, np.ndarray] = {}
        self._closed = set()
        self.closed_reads = 0

    def deposit(self, stage: int, x: np.ndarray):
        self._raws[stage] = np.array(x, copy=True)

    def close(self, stage: int):
        self._closed.add(stage)
        if not self.retain:
            self._raws.pop(stage, None)

    def read(self, stage: int) -> np.ndarray:
        if stage in self._closed:
            self.closed_reads += 1
            if not self.retain:
                raise PrivacyViolationError(
                    f'raw inputs of closed stage {stage} are not retained')
        return self._raws[stage]

    @property
    def stages(self) -> List[int]:
        return sorted(self._raws)


@dataclass
class StageContext:
    t: int
    old: Optional[StageSnapshot]
    new_embedder: Embedder
    new_classifier: ClassifierHead
    mode: str
    theta_fwd: Optional[BiCTNetwork] = None
    theta_bwd: Optional[BiCTNetwork] = None
    epsilon: float = 0.0


@dataclass
class StageRecord:
    stage: int
    mode: str
    epsilon_raw: Optional[float] = None
    epsilon_used: Optional[float] = None
    feature_weight: Optional[float] = None
    transfer_losses: List[Dict[str, float]] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings=True) -> Dict:
        payload = dataclasses.asdict(self)
        if not include_timings:
            payload.pop('timings')
        return payload


@dataclass
class LifelongState:
    """Everything carried from one stage to the next."""

    store: GalleryStore
    vault: RawInputVault
    stage: int = 0
    snapshot: Optional[StageSnapshot] = None
    query_model: Optional[Embedder] = None
    transfer: Tuple[Optional[BiCTNetwork], Optional[BiCTNetwork]] = (None,
                                                                      None)
    queries: Dict[int, SampleSet] = field(default_factory=dict)
    seen_train: List[SampleSet] = field(default_factory=list)


def new_state(cfg: ExperimentConfig) -> LifelongState:
    return LifelongState(
        store=GalleryStore(cfg.model.embed_dim),
        vault=RawInputVault(retain=cfg.mode in ('reindex', 'joint')),
    )


def knowledge_change(old_model, new_model, x, batch=64) -> float:
    """Mean absolute affinity difference of two models on the same rows.

    Rows are processed in chunks of ``batch``; a trailing single row joins
    the previous chunk.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = x.shape[0]
    if rows < 2:
        raise ValueError(f'need at least 2 samples, got {rows}')
    bounds = list(range(0, rows, batch)) + [rows]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        del bounds[-2]
    total = 0.0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        chunk = x[lo:hi]
        diff = affinity(new_model.embed(chunk)) - \
            affinity(old_model.embed(chunk))
        total += float(np.abs(diff).sum())
    return total / rows


def scale_epsilon(raw: float, how='clamp') -> float:
    if how == 'clamp':
        return min(raw, 1.0)
    if how == 'halve':
        return raw / 2.0
    raise ImproperlyConfigured(f'unknown epsilon scaling {how!r}')


def compute_epsilon(old_model, new_model, data, batch=64,
                    scale='clamp') -> float:
    """Knowledge-change coefficient in ``[0, 1]``.

    :raises EpsilonUndefinedError: without a previous model (first stage).
    """
    if old_model is None:
        raise EpsilonUndefinedError('the first stage has no previous model')
    x = data.x if isinstance(data, SampleSet) else data
    return scale_epsilon(knowledge_change(old_model, new_model, x, batch),
                         scale)


def fusion_weight(strategy: str, epsilon: float, stage: int) -> float:
    """Weight of the previous model/features at ``stage``."""
    if strategy == 'dff':
        return epsilon
    if strategy == 'fixed':
        return 0.5
    if strategy == 'increasing':
        return 1.0 - 1.0 / stage
    if strategy == 'decreasing':
        return 1.0 / stage
    if strategy == 'none':
        return 0.0
    raise ImproperlyConfigured(f'unknown fusion strategy {strategy!r}')


def dff_fuse_models(old, new_embedder: Embedder, epsilon: float) -> Embedder:
    """Per-parameter ``epsilon * old + (1 - epsilon) * new``."""
    old_embedder = old.embedder if isinstance(old, StageSnapshot) else old
    if not new_embedder.same_architecture(old_embedder):
        raise ArchitectureMismatchError(
            'cannot fuse embedders with different architectures')
    if not 0.0 <= epsilon <= 1.0:
        raise ImproperlyConfigured(
            f'fusion weight must lie in [0, 1], got {epsilon}')
    fused = copy.deepcopy(new_embedder)
    for target, p_old, p_new in zip(fused.parameters(),
                                    old_embedder.parameters(),
                                    new_embedder.parameters()):
        target.value.setflags(write=True)
        target.value[...] = epsilon * p_old.value \
            + (1.0 - epsilon) * p_new.value
        target.velocity = None
    return fused.eval()


def _make_transfer(cfg: ExperimentConfig, rng, direction, source, target):
    model = cfg.model
    return BiCTNetwork(model.embed_dim, rng, prototypes=model.prototypes,
                       bottleneck=model.bottleneck, direction=direction,
                       source_stage=source, target_stage=target,
                       use_kcm=model.use_kcm, use_fmm=model.use_fmm,
                       gate_fixed=model.gate_fixed)


def train_transfer_networks(ctx: StageContext, data: SampleSet,
                            cfg: ExperimentConfig,
                            rng: Optional[np.random.Generator] = None
                            ) -> Tuple[BiCTNetwork, Optional[BiCTNetwork],
                                       List[Dict[str, float]]]:
    """Train the transfer networks of stage ``ctx.t`` on ``data``.

    Only transfer parameters change; both embedders and classifiers are
    used as frozen functions. Returns eval-mode networks and the mean
    objective (with components) of every epoch.
    """
    if ctx.t < 2 or ctx.old is None:
        raise ProtocolError('transfer networks need a previous stage')
    training: TrainingConfig = cfg.training
    rng = rng if rng is not None else make_rng(cfg.seed, TRANSFER_KEY, ctx.t)

    z_old = ctx.old.embedder.embed(data.x)
    z_new = ctx.new_embedder.embed(data.x)
    if training.stats_source == 'snapshot':
        old_stats = ctx.old.stats
    else:
        old_stats = DomainStatistics.from_features(z_old)
    new_stats = DomainStatistics.from_features(z_new)

    theta_fwd = _make_transfer(cfg, rng, 'forward', ctx.t - 1, ctx.t)
    theta_bwd = _make_transfer(cfg, rng, 'backward', ctx.t, ctx.t - 1) \
        if training.bidirectional else None
    nets = [net for net in (theta_fwd, theta_bwd) if net is not None]
    params = [p for net in nets for p in net.parameters()]
    channels = cfg.model.embed_dim
    paired = SampleSet(np.hstack([z_old, z_new]), data.y, data.stage)
    counts = data.counts()
    per_batch = min(training.ids_per_batch, len(counts))
    per_id = min(training.samples_per_id, min(counts.values()))
    steps = -(-len(counts) // per_batch)

    for net in nets:
        net.train()
    history = []
    for epoch in range(cfg.training.transfer_epochs):
        sums = {name: 0.0 for name in ('total',) + COMPONENTS}
        for _ in range(steps):
            batch = sample_batch(paired, per_batch, per_id, rng)
            b_old, b_new = batch.x[:, :channels], batch.x[:, channels:]
            ctx_obj = ObjectiveContext(
                forward=DirectionBatch(theta_fwd, b_old, b_new, batch.y,
                                       ctx.old.classifier, old_stats),
                backward=DirectionBatch(theta_bwd, b_new, b_old, batch.y,
                                        ctx.new_classifier, new_stats)
                if theta_bwd is not None else None,
                weights=cfg.loss,
                use_bcd=training.use_bcd,
                use_bad=training.use_bad,
                renormalize_masked_rows=training.renormalize_masked_rows,
            )
            for param in params:
                param.zero_grad()
            result = objective_and_backward(ctx_obj)
            if not np.isfinite(result.value):
                raise TrainingDivergedError(
                    f'stage {ctx.t}: transfer objective is {result.value} '
                    f'at epoch {epoch}')
            sgd_step(params, training.transfer_sgd, epoch)
            sums['total'] += result.value
            for name in COMPONENTS:
                sums[name] += result.components[name]
        means = {name: value / steps for name, value in sums.items()}
        history.append(means)
        logger.debug('stage %d transfer epoch %d: objective %.6f',
                     ctx.t, epoch, means['total'])
    for net in nets:
        net.eval()
    return theta_fwd, theta_bwd, history


def _baseline(state: LifelongState, data: StageData, cfg: ExperimentConfig):
    training = cfg.training
    epochs = training.baseline_epochs_first if data.stage == 1 \
        else training.baseline_epochs
    split = data.train
    if cfg.mode == 'joint':
        split = SampleSet.concatenate(state.seen_train + [data.train],
                                      stage=data.stage)
    return train_stage_embedder(
        state.query_model, split, epochs,
        make_rng(cfg.seed, BASELINE_KEY, data.stage), training.baseline_sgd,
        hidden_dim=cfg.model.hidden_dim, embed_dim=cfg.model.embed_dim,
        depth=cfg.model.depth, ids_per_batch=training.ids_per_batch,
        samples_per_id=training.samples_per_id, margin=training.margin,
        logit_scale=cfg.model.logit_scale)


def _historical_raws(state: LifelongState, stage: int) -> np.ndarray:
    raws = [state.vault.read(s) for s in range(1, stage)]
    return np.concatenate(raws) if raws else np.zeros((0, 0))


def run_stage(state: LifelongState, data: StageData,
              cfg: ExperimentConfig) -> Tuple[LifelongState, StageRecord]:
    """Run stage ``data.stage``; stages must arrive in order from 1."""
    t = data.stage
    if t != state.stage + 1:
        raise ProtocolError(
            f'expected stage {state.stage + 1}, got stage {t}')
    record = StageRecord(stage=t, mode=cfg.mode)
    clock = time.perf_counter()

    embedder, classifier = _baseline(state, data, cfg)
    record.timings['baseline'] = time.perf_counter() - clock
    logger.info('stage %d (%s): baseline trained', t, cfg.mode)

    query_model = embedder
    if t >= 2 and cfg.mode != 'joint':
        ctx = StageContext(t, state.snapshot, embedder, classifier, cfg.mode)
        if cfg.mode in ('rfl', 'reindex'):
            clock = time.perf_counter()
            ctx.theta_fwd, ctx.theta_bwd, record.transfer_losses = \
                train_transfer_networks(ctx, data.train, cfg)
            record.timings['transfer'] = time.perf_counter() - clock

        fusion = cfg.fusion
        raw = knowledge_change(state.snapshot.embedder, embedder,
                               data.train.x, fusion.epsilon_batch)
        ctx.epsilon = scale_epsilon(raw, fusion.epsilon_scale)
        weight = fusion_weight(fusion.strategy, ctx.epsilon, t)
        record.epsilon_raw, record.epsilon_used = raw, ctx.epsilon
        query_model = dff_fuse_models(state.snapshot, embedder, weight)
        logger.info('stage %d: epsilon %.4f (raw %.4f), fusion weight %.4f',
                    t, ctx.epsilon, raw, weight)

        clock = time.perf_counter()
        if cfg.mode == 'rfl':
            record.feature_weight = weight if fusion.feature_fusion else 0.0
            state.store.update_all(ctx.theta_fwd, record.feature_weight, t)
        elif cfg.mode == 'reindex':
            state.store.reextract_all(
                query_model.embed(_historical_raws(state, t)), t)
        else:
            state.store.advance(t)
        record.timings['gallery_update'] = time.perf_counter() - clock
        state.transfer = (ctx.theta_fwd, ctx.theta_bwd)
    elif t >= 2:
        state.store.reextract_all(
            query_model.embed(_historical_raws(state, t)), t)

    state.store.append_features(query_model.embed(data.gallery.x),
                                data.gallery.y, t)
    state.vault.deposit(t, data.gallery.x)
    state.vault.close(t)
    state.snapshot = snapshot_freeze(
        query_model, classifier,
        compute_domain_stats(query_model, data.train), t)
    state.query_model = state.snapshot.embedder
    state.queries[t] = data.query
    state.seen_train.append(data.train)
    state.stage = t
    return state, record


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    state: LifelongState
    records: List[StageRecord]
    report: MetricsReport

    def content_hash(self) -> str:
        return self.report.content_hash({
            'config': report_config(self.config),
            'stages': [r.to_dict(include_timings=False)
                       for r in self.records],
        })


def build_stream(cfg: ExperimentConfig) -> List[StageData]:
    stream = cfg.stream
    return make_stream(stream.stages, stream.ids_per_stage,
                       stream.samples_per_id, stream.raw_dim,
                       stream.severity, make_rng(cfg.seed, STREAM_KEY),
                       noise_std=stream.noise_std,
                       train_fraction=stream.train_fraction,
                       queries_per_id=stream.queries_per_id)


def run_experiment(cfg: ExperimentConfig,
                   stream: Optional[Sequence[StageData]] = None
                   ) -> ExperimentResult:
    """Run every stage of one mode and evaluate after each stage."""
    stream = list(stream) if stream is not None else build_stream(cfg)
    state = new_state(cfg)
    report = MetricsReport(mode=cfg.mode, seed=cfg.seed)
    records = []
    started = time.perf_counter()
    for data in stream:
        state, record = run_stage(state, data, cfg)
        results = evaluate_stage(state.query_model, state.store,
                                 state.queries, stage=data.stage)
        report.record(data.stage, results)
        report.epsilon.append({'stage': data.stage,
                               'raw': record.epsilon_raw,
                               'used': record.epsilon_used})
        records.append(record)
        logger.info('stage %d (%s): mean mAP %.4f', data.stage, cfg.mode,
                    float(np.mean([r.mAP for r in results.values()])))
    report.runtime['total_seconds'] = time.perf_counter() - started
    if cfg.mode == 'rfl':
        report.runtime['closed_stage_raw_reads'] = state.vault.closed_reads
    return ExperimentResult(cfg, state, records, report)


def run_arms(cfg: ExperimentConfig, modes: Sequence[str], jobs=1,
             stream: Optional[Sequence[StageData]] = None
             ) -> Dict[str, ExperimentResult]:
    """Run several modes on one stream, ``jobs`` at a time."""
    stream = list(stream) if stream is not None else build_stream(cfg)
    configs = {mode: dataclasses.replace(cfg, mode=mode) for mode in modes}
    if jobs <= 1 or len(modes) == 1:
        return {mode: run_experiment(c, stream)
                for mode, c in configs.items()}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = {mode: pool.submit(run_experiment, c, stream)
                   for mode, c in configs.items()}
        return {mode: future.result() for mode, future in futures.items()}


def save_checkpoint(path, result: ExperimentResult, config_text: str):
    """Final query model, last transfer networks and the config echo."""
    arrays = {f'query.{k}': v
              for k, v in result.state.query_model.state_dict().items()}
    for name, net in zip(('theta_fwd', 'theta_bwd'), result.state.transfer):
        if net is not None:
            arrays.update({f'{name}.{k}': v
                           for k, v in net.state_dict().items()})
    arrays['config'] = np.array(config_text)
    arrays['stage'] = np.array(result.state.stage)
    np.savez(path, **arrays)


def load_query_model(path, cfg: ExperimentConfig) -> Embedder:
    """Rebuild the query embedder stored by :func:`save_checkpoint`."""
    with np.load(path) as archive:
        state = {key[len('query.'):]: archive[key]
                 for key in archive.files if key.startswith('query.')}
    model = Embedder(cfg.stream.raw_dim, cfg.model.hidden_dim,
                     cfg.model.embed_dim, make_rng(0), depth=cfg.model.depth)
    return model.load_state_dict(state).eval()
