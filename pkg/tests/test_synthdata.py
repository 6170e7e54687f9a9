# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

import numpy as np
import pytest

from bicr.exceptions import ImproperlyConfigured, InsufficientDataError
from bicr.numkernel import make_rng
from bicr.synthdata import (
    DomainSpec,
    SampleSet,
    load_stream,
    make_stream,
    sample_batch,
    save_stream,
)
from .asserts import assert_bitwise_equal


def _stream(seed=0, **kwargs):
    args = dict(stages=3, ids_per_stage=8, samples_per_id=6, raw_dim=10,
                severity=1.0)
    args.update(kwargs)
    return make_stream(rng=make_rng(seed), **args)


class TestMakeStream:
    def test_count_contract(self):
        stream = make_stream(5, 50, 20, 48, 1.0, make_rng(0))
        assert [data.stage for data in stream] == [1, 2, 3, 4, 5]
        labels = np.concatenate([np.concatenate([d.train.y, d.gallery.y])
                                 for d in stream])
        assert np.unique(labels).size == 250
        for data in stream:
            assert len(data.train) + len(data.gallery) + len(data.query) \
                == 50 * 20

    def test_identities_are_disjoint(self, seeded_rng):
        stream = make_stream(4, 6, 5, 8, 1.0, seeded_rng)
        seen = set()
        for data in stream:
            train = set(data.train.identities.tolist())
            gallery = set(data.gallery.identities.tolist())
            assert not train & gallery
            assert not (train | gallery) & seen
            seen |= train | gallery

    def test_queries_come_from_the_gallery(self):
        for data in _stream():
            assert set(data.query.identities.tolist()) == \
                set(data.gallery.identities.tolist())
            assert all(count == 2 for count in data.query.counts().values())
            assert all(count == 4 for count in data.gallery.counts().values())

    def test_train_fraction_is_clipped(self):
        data = _stream(ids_per_stage=4, train_fraction=0.9)[0]
        assert data.train.identities.size == 2
        assert data.gallery.identities.size == 2

    def test_deterministic(self):
        first, second = _stream(seed=5), _stream(seed=5)
        for a, b in zip(first, second):
            assert_bitwise_equal(a.train.x, b.train.x)
            assert_bitwise_equal(a.query.y, b.query.y)

    def test_zero_severity_shares_one_domain(self):
        stream = _stream(severity=0.0)
        for data in stream:
            np.testing.assert_allclose(data.domain.rotation, np.eye(10),
                                       atol=1e-15)
            np.testing.assert_array_equal(data.domain.scale, np.ones(10))
            np.testing.assert_array_equal(data.domain.shift, np.zeros(10))

    def test_severity_moves_the_domain(self):
        mild = _stream(severity=0.2)[0].domain
        strong = _stream(severity=2.0)[0].domain
        assert np.linalg.norm(strong.shift) > np.linalg.norm(mild.shift)
        assert np.linalg.norm(strong.rotation - np.eye(10)) > \
            np.linalg.norm(mild.rotation - np.eye(10))

    @pytest.mark.parametrize(
        'kwargs',
        [
            dict(stages=0),
            dict(ids_per_stage=3),
            dict(samples_per_id=3),
            dict(queries_per_id=0),
            dict(queries_per_id=6),
            dict(severity=-1.0),
            dict(noise_std=-0.1),
        ]
    )
    def test_invalid_counts(self, kwargs):
        with pytest.raises(ImproperlyConfigured):
            _stream(**kwargs)


class TestDomainSpec:
    def test_rotation_is_orthogonal(self, seeded_rng):
        domain = DomainSpec.draw(12, 1.5, 0.5, seeded_rng)
        np.testing.assert_allclose(domain.rotation @ domain.rotation.T,
                                   np.eye(12), atol=1e-9)
        assert np.all(domain.scale > 0)

    def test_map_is_invertible(self, rng):
        domain = DomainSpec.draw(6, 1.0, 0.5, rng)
        x = rng.normal(size=(5, 6))
        np.testing.assert_allclose(domain.invert(domain.apply(x)), x,
                                   atol=1e-9)

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            DomainSpec(np.eye(2), np.array([1.0, 0.0]), np.zeros(2), 0.5, 1.0)


class TestSampleSet:
    def setup_method(self, method):
        self.samples = SampleSet(np.arange(12.0).reshape(6, 2),
                                 np.array([3, 3, 5, 5, 5, 9]), stage=2)

    def test_counts(self):
        assert self.samples.counts() == {3: 2, 5: 3, 9: 1}
        assert self.samples.identities.tolist() == [3, 5, 9]
        assert len(self.samples) == 6

    def test_item(self):
        sample = self.samples[2]
        assert sample.y == 5
        assert sample.stage == 2
        assert sample.x.tolist() == [4.0, 5.0]

    def test_take_and_concatenate(self):
        head = self.samples.take([0, 1])
        both = SampleSet.concatenate([head, self.samples.take([5])], stage=7)
        assert both.y.tolist() == [3, 3, 9]
        assert both.stage == 7
        assert SampleSet.concatenate([head]).stage == 2


class TestSampleBatch:
    def test_sixteen_ids_by_four(self):
        data = make_stream(1, 40, 20, 8, 1.0, make_rng(0))[0]
        batch = sample_batch(data, 16, 4, make_rng(1))
        assert len(batch) == 64
        assert sorted(batch.counts().values()) == [4] * 16

    def test_tiny_batch(self):
        batch = sample_batch(_stream()[0], 2, 2, make_rng(1))
        assert len(batch) == 4
        assert len(batch.counts()) == 2

    def test_deterministic(self):
        data = _stream()[0]
        first = sample_batch(data, 3, 2, make_rng(9))
        second = sample_batch(data, 3, 2, make_rng(9))
        assert_bitwise_equal(first.x, second.x)

    def test_insufficient_identities(self):
        with pytest.raises(InsufficientDataError):
            sample_batch(_stream()[0], 10, 2, make_rng(0))

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientDataError):
            sample_batch(_stream()[0].train, 2, 7, make_rng(0))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        stream = _stream()
        path = tmp_path / 'stream.npz'
        save_stream(path, stream)
        loaded = load_stream(path)
        assert [d.stage for d in loaded] == [1, 2, 3]
        for a, b in zip(stream, loaded):
            for part in ('train', 'gallery', 'query'):
                assert_bitwise_equal(getattr(a, part).x, getattr(b, part).x)
                assert_bitwise_equal(getattr(a, part).y, getattr(b, part).y)
            assert_bitwise_equal(a.domain.rotation, b.domain.rotation)
            assert a.domain.severity == b.domain.severity

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImproperlyConfigured, match='cannot read stream'):
            load_stream(tmp_path / 'missing.npz')
