# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

import dataclasses

import numpy as np
import pytest

from bicr.baseline import ClassifierHead, Embedder
from bicr.config import ExperimentConfig, FusionConfig
from bicr.exceptions import (
    ArchitectureMismatchError,
    EpsilonUndefinedError,
    ImproperlyConfigured,
    PrivacyViolationError,
    ProtocolError,
)
from bicr.losses import COMPONENTS
from bicr.lifelong import (
    RawInputVault,
    StageContext,
    StageRecord,
    compute_epsilon,
    dff_fuse_models,
    fusion_weight,
    knowledge_change,
    load_query_model,
    new_state,
    run_arms,
    run_experiment,
    run_stage,
    save_checkpoint,
    scale_epsilon,
    train_transfer_networks,
)
from bicr.numkernel import make_rng
from .asserts import assert_bitwise_equal, assert_params_equal
from .fixtures import tiny_config


def _embedder(seed, raw_dim=12, hidden_dim=16, embed_dim=8, depth=2):
    return Embedder(raw_dim, hidden_dim, embed_dim, make_rng(seed),
                    depth=depth).eval()


def _first_stage(cfg, stream):
    state, _ = run_stage(new_state(cfg), stream[0], cfg)
    return state


def _with_training(cfg, **changes):
    return dataclasses.replace(
        cfg, training=dataclasses.replace(cfg.training, **changes))


def _without_feature_fusion(cfg):
    return dataclasses.replace(
        cfg, fusion=dataclasses.replace(cfg.fusion, feature_fusion=False))


class TestRawInputVault:
    def test_dropped_when_closed(self):
        vault = RawInputVault(retain=False)
        vault.deposit(1, np.ones((2, 3)))
        assert vault.read(1).shape == (2, 3)
        assert vault.closed_reads == 0
        vault.close(1)
        assert vault.stages == []
        with pytest.raises(PrivacyViolationError):
            vault.read(1)
        assert vault.closed_reads == 1

    def test_retained(self):
        vault = RawInputVault(retain=True)
        vault.deposit(1, np.ones((2, 3)))
        vault.close(1)
        assert vault.read(1).shape == (2, 3)
        assert vault.read(1).shape == (2, 3)
        assert vault.closed_reads == 2
        assert vault.stages == [1]

    def test_deposit_copies(self):
        vault = RawInputVault(retain=True)
        raw = np.zeros((1, 2))
        vault.deposit(1, raw)
        raw[...] = 1.0
        assert not np.any(vault.read(1))

    def test_mode_decides_retention(self, tiny_cfg):
        assert not new_state(tiny_cfg).vault.retain
        for mode in ('reindex', 'joint'):
            cfg = dataclasses.replace(tiny_cfg, mode=mode)
            assert new_state(cfg).vault.retain
        frozen = dataclasses.replace(tiny_cfg, mode='frozen')
        assert not new_state(frozen).vault.retain


class TestKnowledgeChange:
    def setup_method(self, method):
        self.x = make_rng(5).normal(size=(20, 12))

    def test_identical_models(self):
        model = _embedder(0)
        assert knowledge_change(model, model, self.x) == 0.0

    def test_total_variation_bound(self, seeded_rng):
        old, new = _embedder(1), _embedder(2)
        raw = knowledge_change(old, new, seeded_rng.normal(size=(30, 12)),
                               batch=8)
        assert 0.0 < raw <= 2.0

    def test_trailing_row_joins_previous_chunk(self):
        old, new = _embedder(1), _embedder(2)
        x = self.x[:9]
        assert knowledge_change(old, new, x, batch=8) == \
            knowledge_change(old, new, x, batch=64)

    def test_needs_two_rows(self):
        model = _embedder(0)
        with pytest.raises(ValueError):
            knowledge_change(model, model, self.x[:1])

    @pytest.mark.parametrize(
        'raw,how,expected',
        [
            (0.4, 'clamp', 0.4),
            (1.6, 'clamp', 1.0),
            (1.6, 'halve', 0.8),
            (2.0, 'halve', 1.0),
        ]
    )
    def test_scale_epsilon(self, raw, how, expected):
        assert scale_epsilon(raw, how) == expected

    def test_unknown_scaling(self):
        with pytest.raises(ImproperlyConfigured):
            scale_epsilon(0.5, 'sqrt')

    def test_compute_epsilon(self):
        old, new = _embedder(1), _embedder(2)
        eps = compute_epsilon(old, new, self.x, batch=8)
        assert 0.0 <= eps <= 1.0
        assert compute_epsilon(new, new, self.x) == 0.0

    def test_first_stage_has_no_epsilon(self):
        with pytest.raises(EpsilonUndefinedError):
            compute_epsilon(None, _embedder(0), self.x)


class TestFusionWeight:
    @pytest.mark.parametrize(
        'strategy,stage,expected',
        [
            ('dff', 3, 0.3),
            ('fixed', 3, 0.5),
            ('increasing', 4, 0.75),
            ('decreasing', 4, 0.25),
            ('none', 4, 0.0),
        ]
    )
    def test_strategies(self, strategy, stage, expected):
        assert fusion_weight(strategy, 0.3, stage) == pytest.approx(expected)

    def test_unknown_strategy(self):
        with pytest.raises(ImproperlyConfigured):
            fusion_weight('random', 0.3, 2)


class TestDffFuseModels:
    def setup_method(self, method):
        self.old, self.new = _embedder(1), _embedder(2)

    def _pairs(self, fused):
        return zip(fused.parameters(), self.old.parameters(),
                   self.new.parameters())

    def test_zero_keeps_the_new_model(self):
        assert_params_equal(dff_fuse_models(self.old, self.new, 0.0),
                            self.new)

    def test_one_keeps_the_old_model(self):
        assert_params_equal(dff_fuse_models(self.old, self.new, 1.0),
                            self.old)

    def test_half_is_the_average(self):
        fused = dff_fuse_models(self.old, self.new, 0.5)
        for p, p_old, p_new in self._pairs(fused):
            assert_bitwise_equal(p.value, 0.5 * p_old.value
                                 + 0.5 * p_new.value)

    def test_convex_combination(self, seeded_rng):
        eps = float(seeded_rng.uniform())
        fused = dff_fuse_models(self.old, self.new, eps)
        for p, p_old, p_new in self._pairs(fused):
            low = np.minimum(p_old.value, p_new.value)
            high = np.maximum(p_old.value, p_new.value)
            assert np.all(p.value >= low - 1e-15)
            assert np.all(p.value <= high + 1e-15)

    def test_returns_a_new_eval_model(self):
        before = self.new.state_dict()
        fused = dff_fuse_models(self.old, self.new.train(), 0.3)
        assert fused is not self.new
        assert not fused.training
        for key, value in self.new.state_dict().items():
            assert_bitwise_equal(before[key], value)

    def test_architecture_mismatch(self):
        with pytest.raises(ArchitectureMismatchError):
            dff_fuse_models(self.old, _embedder(3, hidden_dim=10), 0.5)

    @pytest.mark.parametrize('eps', [-0.01, 1.01])
    def test_weight_range(self, eps):
        with pytest.raises(ImproperlyConfigured):
            dff_fuse_models(self.old, self.new, eps)


class TestTrainTransferNetworks:
    def setup_method(self, method):
        self.cfg = tiny_config()

    def _context(self, tiny_stream, t=2):
        state = _first_stage(self.cfg, tiny_stream)
        rng = make_rng(7)
        data = tiny_stream[1].train
        new = _embedder(8)
        head = ClassifierHead(8, data.identities, rng)
        return StageContext(t, state.snapshot, new, head, 'rfl'), data

    def test_networks_and_history(self, tiny_stream):
        ctx, data = self._context(tiny_stream)
        fwd, bwd, history = train_transfer_networks(ctx, data, self.cfg)
        assert fwd.direction == 'forward'
        assert bwd.direction == 'backward'
        assert (fwd.source_stage, fwd.target_stage) == (1, 2)
        assert (bwd.source_stage, bwd.target_stage) == (2, 1)
        assert not fwd.training and not bwd.training
        assert len(history) == self.cfg.training.transfer_epochs
        for epoch in history:
            assert set(epoch) == {'total'} | set(COMPONENTS)
            assert np.isfinite(epoch['total'])

    def test_frozen_models_are_untouched(self, tiny_stream):
        ctx, data = self._context(tiny_stream)
        frozen = [ctx.new_embedder, ctx.new_classifier, ctx.old.embedder,
                  ctx.old.classifier]
        before = [module.state_dict() for module in frozen]
        train_transfer_networks(ctx, data, self.cfg)
        for module, state in zip(frozen, before):
            for key, value in module.state_dict().items():
                assert_bitwise_equal(state[key], value)

    def test_forward_only(self, tiny_stream):
        cfg = _with_training(self.cfg, bidirectional=False)
        ctx, data = self._context(tiny_stream)
        fwd, bwd, _ = train_transfer_networks(ctx, data, cfg)
        assert fwd is not None
        assert bwd is None

    def test_zero_epochs(self, tiny_stream):
        cfg = _with_training(self.cfg, transfer_epochs=0)
        ctx, data = self._context(tiny_stream)
        fwd, _, history = train_transfer_networks(ctx, data, cfg,
                                                  rng=make_rng(11))
        assert history == []
        fresh, _, _ = train_transfer_networks(ctx, data, cfg,
                                              rng=make_rng(11))
        assert_params_equal(fwd, fresh)

    def test_deterministic(self, tiny_stream):
        ctx, data = self._context(tiny_stream)
        first = train_transfer_networks(ctx, data, self.cfg)
        second = train_transfer_networks(ctx, data, self.cfg)
        assert_params_equal(first[0], second[0])
        assert_params_equal(first[1], second[1])
        assert first[2] == second[2]

    def test_needs_a_previous_stage(self, tiny_stream):
        ctx, data = self._context(tiny_stream, t=1)
        with pytest.raises(ProtocolError):
            train_transfer_networks(ctx, data, self.cfg)
        ctx = dataclasses.replace(ctx, t=2, old=None)
        with pytest.raises(ProtocolError):
            train_transfer_networks(ctx, data, self.cfg)


class TestRunStage:
    def test_out_of_order(self, tiny_cfg, tiny_stream):
        with pytest.raises(ProtocolError):
            run_stage(new_state(tiny_cfg), tiny_stream[1], tiny_cfg)
        state = _first_stage(tiny_cfg, tiny_stream)
        with pytest.raises(ProtocolError):
            run_stage(state, tiny_stream[0], tiny_cfg)

    @pytest.mark.parametrize('mode', ['rfl', 'reindex', 'frozen', 'joint'])
    def test_first_stage(self, tiny_cfg, tiny_stream, mode):
        cfg = dataclasses.replace(tiny_cfg, mode=mode)
        state, record = run_stage(new_state(cfg), tiny_stream[0], cfg)
        assert record.epsilon_raw is None
        assert record.transfer_losses == []
        assert state.transfer == (None, None)
        gallery = tiny_stream[0].gallery
        np.testing.assert_allclose(state.store.features,
                                   state.query_model.embed(gallery.x),
                                   atol=1e-6)
        assert state.store.identities.tolist() == gallery.y.tolist()
        assert state.stage == 1
        assert state.snapshot.stage == 1

    def test_rfl_second_stage(self, tiny_cfg, tiny_stream):
        state = _first_stage(tiny_cfg, tiny_stream)
        state, record = run_stage(state, tiny_stream[1], tiny_cfg)
        assert state.store.current_version == 2
        assert set(state.store.space_versions.tolist()) == {2}
        assert sorted(set(state.store.origin_stages.tolist())) == [1, 2]
        assert 0.0 <= record.epsilon_used <= 1.0
        assert record.feature_weight == record.epsilon_used
        assert len(record.transfer_losses) == \
            tiny_cfg.training.transfer_epochs
        assert set(record.timings) == {'baseline', 'transfer',
                                       'gallery_update'}
        fwd, bwd = state.transfer
        assert fwd.direction == 'forward' and bwd.direction == 'backward'

    def test_without_feature_fusion(self, tiny_cfg, tiny_stream):
        cfg = dataclasses.replace(
            tiny_cfg, fusion=FusionConfig(epsilon_batch=8,
                                          feature_fusion=False))
        state = _first_stage(cfg, tiny_stream)
        _, record = run_stage(state, tiny_stream[1], cfg)
        assert record.feature_weight == 0.0

    def test_frozen_keeps_historical_features(self, tiny_cfg, tiny_stream):
        cfg = dataclasses.replace(tiny_cfg, mode='frozen')
        state = _first_stage(cfg, tiny_stream)
        before = state.store.features
        state, record = run_stage(state, tiny_stream[1], cfg)
        assert_bitwise_equal(state.store.features[:before.shape[0]], before)
        assert record.transfer_losses == []
        assert record.epsilon_used is not None
        assert state.transfer == (None, None)

    def test_reindex_re_extracts(self, tiny_cfg, tiny_stream):
        cfg = dataclasses.replace(tiny_cfg, mode='reindex')
        state = _first_stage(cfg, tiny_stream)
        state, _ = run_stage(state, tiny_stream[1], cfg)
        raws = np.concatenate([tiny_stream[0].gallery.x,
                               tiny_stream[1].gallery.x])
        np.testing.assert_allclose(state.store.features,
                                   state.query_model.embed(raws), atol=1e-6)
        assert set(state.store.space_versions.tolist()) == {2}

    def test_joint_trains_on_the_union(self, tiny_cfg, tiny_stream):
        cfg = dataclasses.replace(tiny_cfg, mode='joint')
        state = _first_stage(cfg, tiny_stream)
        state, record = run_stage(state, tiny_stream[1], cfg)
        assert record.epsilon_raw is None
        seen = set(tiny_stream[0].train.identities.tolist()) | \
            set(tiny_stream[1].train.identities.tolist())
        assert set(state.snapshot.classifier.classes.tolist()) == seen
        assert set(state.store.space_versions.tolist()) == {2}

    def test_record_serializes(self):
        record = StageRecord(2, 'rfl', 0.4, 0.4, 0.4,
                             timings={'baseline': 0.1})
        assert 'timings' in record.to_dict()
        assert 'timings' not in record.to_dict(include_timings=False)


class TestRunExperiment:
    def test_rfl_run(self, tiny_cfg, tiny_stream):
        result = run_experiment(tiny_cfg, tiny_stream)
        assert [r.stage for r in result.records] == [1, 2, 3]
        assert result.state.store.current_version == 3
        assert len(result.report.metrics) == 1 + 2 + 3
        for values in result.report.metrics.values():
            assert 0.0 <= values['mAP'] <= 1.0
            assert 0.0 <= values['R1'] <= 1.0
        assert [e['stage'] for e in result.report.epsilon] == [1, 2, 3]
        assert result.report.epsilon[0]['raw'] is None

    def test_rfl_never_reads_closed_raws(self, tiny_cfg, tiny_stream):
        result = run_experiment(tiny_cfg, tiny_stream)
        assert result.report.runtime['closed_stage_raw_reads'] == 0
        assert result.state.vault.stages == []
        with pytest.raises(PrivacyViolationError):
            result.state.vault.read(1)

    def test_content_hash_is_deterministic(self, tiny_cfg, tiny_stream):
        first = run_experiment(tiny_cfg, tiny_stream)
        second = run_experiment(tiny_cfg)
        assert first.content_hash() == second.content_hash()
        other = run_experiment(dataclasses.replace(tiny_cfg, seed=1))
        assert first.content_hash() != other.content_hash()

    def test_rfl_and_reindex_share_training(self, tiny_cfg, tiny_stream):
        arms = run_arms(tiny_cfg, ['rfl', 'reindex'], stream=tiny_stream)
        rfl, reindex = arms['rfl'], arms['reindex']
        assert_params_equal(rfl.state.query_model, reindex.state.query_model)
        for a, b in zip(rfl.state.transfer, reindex.state.transfer):
            assert_params_equal(a, b)
        for a, b in zip(rfl.records, reindex.records):
            assert a.epsilon_raw == b.epsilon_raw
            assert a.transfer_losses == b.transfer_losses

    def test_parallel_arms_match_sequential(self, tiny_cfg, tiny_stream):
        modes = ['rfl', 'frozen']
        sequential = run_arms(tiny_cfg, modes, jobs=1, stream=tiny_stream)
        parallel = run_arms(tiny_cfg, modes, jobs=2, stream=tiny_stream)
        assert list(parallel) == modes
        for mode in modes:
            assert parallel[mode].config.mode == mode
            assert parallel[mode].content_hash() == \
                sequential[mode].content_hash()

    def test_feature_fusion_switch_only_reaches_rfl(self, tiny_cfg,
                                                    tiny_stream):
        modes = ['reindex', 'frozen', 'rfl']
        on = run_arms(tiny_cfg, modes, stream=tiny_stream)
        off = run_arms(_without_feature_fusion(tiny_cfg), modes,
                       stream=tiny_stream)
        for mode in ('reindex', 'frozen'):
            assert on[mode].content_hash() == off[mode].content_hash()
            assert on[mode].report.to_dict(include_runtime=False) == \
                off[mode].report.to_dict(include_runtime=False)
        assert on['rfl'].content_hash() != off['rfl'].content_hash()
        assert [r.feature_weight for r in off['rfl'].records[1:]] == [0, 0]


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_cfg, tiny_stream):
        result = run_experiment(tiny_cfg, tiny_stream)
        path = tmp_path / 'checkpoint.npz'
        save_checkpoint(path, result, 'seed = 0\n')
        model = load_query_model(path, tiny_cfg)
        x = tiny_stream[2].query.x
        assert_bitwise_equal(model.embed(x), result.state.query_model.embed(x))
        with np.load(path) as archive:
            assert str(archive['config']) == 'seed = 0\n'
            assert int(archive['stage']) == 3
            assert any(key.startswith('theta_fwd.') for key in archive.files)
            assert any(key.startswith('theta_bwd.') for key in archive.files)


# Desk-scale comparison of the four arms on the default five-stage stream.
ARM_SEEDS = range(5)
ARM_MODES = ('joint', 'reindex', 'rfl', 'frozen')


@pytest.fixture(scope='module')
def default_arms():
    return {seed: run_arms(ExperimentConfig(seed=seed), ARM_MODES,
                           jobs=len(ARM_MODES))
            for seed in ARM_SEEDS}


def _seed_mean(arms, mode, value):
    return float(np.mean([value(arms[seed][mode].report)
                          for seed in ARM_SEEDS]))


@pytest.mark.slow
class TestArmComparison:
    def test_mode_ordering(self, default_arms):
        final = {mode: _seed_mean(default_arms, mode,
                                  lambda report: report.final_mean('mAP'))
                 for mode in ARM_MODES}
        assert final['joint'] >= final['reindex'] >= final['rfl'] >= \
            final['frozen']
        gap = final['reindex'] - final['frozen']
        assert final['rfl'] - final['frozen'] >= 0.5 * gap

    def test_rfl_forgets_no_more_than_frozen(self, default_arms):
        forgetting = {
            mode: _seed_mean(default_arms, mode,
                             lambda report: report.forgetting()['mAP'])
            for mode in ('rfl', 'frozen')}
        assert forgetting['rfl'] <= forgetting['frozen']

    def test_rfl_never_reads_closed_raws(self, default_arms):
        for seed in ARM_SEEDS:
            runtime = default_arms[seed]['rfl'].report.runtime
            assert runtime['closed_stage_raw_reads'] == 0

    def test_feature_fusion_ablation(self, default_arms):
        changed = 0
        for seed in ARM_SEEDS:
            ablated = run_arms(
                _without_feature_fusion(ExperimentConfig(seed=seed)),
                ['reindex', 'rfl'], jobs=2)
            reindex = default_arms[seed]['reindex']
            assert ablated['reindex'].content_hash() == \
                reindex.content_hash()
            assert ablated['reindex'].report.to_dict(include_runtime=False) \
                == reindex.report.to_dict(include_runtime=False)
            before = default_arms[seed]['rfl'].report.final_mean('mAP')
            after = ablated['rfl'].report.final_mean('mAP')
            changed += before != after
        assert changed >= 4
