import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slimfl import datakit as dk
from slimfl.errors import (
    BadMagicError,
    CountMismatchError,
    IdxFormatError,
    InvalidParameterError,
    ShapeError,
    TruncatedPayloadError,
)
from slimfl.rng import stream
from slimfl.slimnet import softmax


def balanced_labels(n_per_class=100, classes=10):
    return np.repeat(np.arange(classes), n_per_class)


class TestDataset:
    def test_validation(self):
        with pytest.raises(ShapeError):
            dk.Dataset(np.zeros((3, 2, 2)), np.zeros(2, dtype=int))
        with pytest.raises(InvalidParameterError):
            dk.Dataset(np.zeros((1, 2, 2)), np.array([10]))

    def test_subset(self):
        d = dk.synthetic_classification(20, seed=0, image_size=4)
        s = d.subset([3, 1])
        np.testing.assert_array_equal(s.images, d.images[[3, 1]])
        assert len(s) == 2


class TestLargestRemainder:
    def test_exact_and_ties(self):
        np.testing.assert_array_equal(dk.largest_remainder(np.array([0.5, 0.5]), 3), [2, 1])
        np.testing.assert_array_equal(dk.largest_remainder(np.array([0.25, 0.75]), 4), [1, 3])

    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=12), st.integers(0, 500))
    def test_sum_and_error(self, weights, total):
        q = np.array(weights) / sum(weights)
        out = dk.largest_remainder(q, total)
        assert out.sum() == total
        assert np.all(np.abs(out - q * total) < 1.0)


class TestDirichletPartition:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 30), st.sampled_from([0.05, 0.1, 1.0, 10.0, 1e6]), st.integers(0, 10_000),
           st.integers(1, 40))
    def test_bijection(self, K, alpha, seed, per_class):
        labels = stream(seed, "t").permutation(balanced_labels(per_class, 5))
        part = dk.dirichlet_partition(labels, K, alpha, seed)
        allidx = np.concatenate(part.shards)
        np.testing.assert_array_equal(np.sort(allidx), np.arange(labels.size))
        assert part.K == K
        assert part.sizes().sum() == labels.size

    def test_proportions_and_rounding(self):
        labels = balanced_labels(37)
        K, seed = 7, 3
        part = dk.dirichlet_partition(labels, K, 0.5, seed)
        counts = part.class_counts(labels)
        for c in range(10):
            q = stream(seed, "dirichlet", c).dirichlet(np.full(K, 0.5))
            assert abs(q.sum() - 1) < 1e-12
            assert np.abs(counts[c] - q * 37).sum() <= K

    def test_iid_limit(self):
        labels = balanced_labels(1000)
        share = dk.dirichlet_partition(labels, 10, 1e6, 0).class_counts(labels) / 1000
        assert np.all(np.abs(share - 0.1) <= 0.01)

    def test_concentrated(self):
        labels = balanced_labels(100)
        means = []
        for seed in range(100):
            counts = dk.dirichlet_partition(labels, 10, 0.1, seed).class_counts(labels)
            means.append((counts.max(axis=1) / 100).mean())
        assert np.mean(means) > 0.5

    def test_deterministic(self):
        labels = balanced_labels(20)
        a, b = (dk.dirichlet_partition(labels, 4, 1.0, 9) for _ in range(2))
        for x, y in zip(a.shards, b.shards):
            np.testing.assert_array_equal(x, y)

    def test_more_devices_than_samples(self):
        labels = np.array([0, 0, 1])
        part = dk.dirichlet_partition(labels, 10, 1.0, 0)
        assert part.sizes().sum() == 3
        assert (part.sizes() == 0).sum() >= 7

    @pytest.mark.parametrize("K,alpha", [(0, 1.0), (-1, 1.0), (3, 0.0), (3, -1.0)])
    def test_rejects(self, K, alpha):
        with pytest.raises(InvalidParameterError):
            dk.dirichlet_partition(balanced_labels(2), K, alpha, 0)

    def test_partition_validation(self):
        with pytest.raises(InvalidParameterError):
            dk.Partition((np.array([0, 1]), np.array([1])), 2)


class TestSynthetic:
    def test_balanced_and_range(self):
        d = dk.synthetic_classification(1003, seed=1)
        assert d.images.shape == (1003, 28, 28)
        counts = np.bincount(d.labels, minlength=10)
        assert counts.max() - counts.min() <= 1
        assert d.images.min() >= 0 and d.images.max() <= 1

    def test_deterministic(self):
        a, b = dk.synthetic_classification(50, seed=4), dk.synthetic_classification(50, seed=4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_too_small(self):
        with pytest.raises(InvalidParameterError):
            dk.synthetic_classification(9, classes=10)

    def test_linear_separability(self):
        d = dk.synthetic_classification(500, seed=0)
        X = np.c_[d.images.reshape(500, -1), np.ones(500)]
        Y = np.eye(10)[d.labels]
        W = np.zeros((X.shape[1], 10))
        for _ in range(50):
            W -= 0.5 * X.T @ (softmax(X @ W) - Y) / 500
        assert (np.argmax(X @ W, axis=1) == d.labels).mean() > 0.9


class TestHoldout:
    def test_split(self):
        d = dk.synthetic_classification(100, seed=0, image_size=4)
        train, test = dk.holdout_split(d, 0.1, 5)
        assert (len(train), len(test)) == (90, 10)
        both = np.concatenate([train.images, test.images]).reshape(100, -1)
        assert {r.tobytes() for r in both} == {r.tobytes() for r in d.images.reshape(100, -1)}

    def test_bad_fraction(self):
        with pytest.raises(InvalidParameterError):
            dk.holdout_split(dk.synthetic_classification(10, seed=0, image_size=2), 1.0, 0)


def write_idx(path, magic, dims, payload):
    path.write_bytes(struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(payload))
    return path


class TestIdx:
    def test_crafted_fixture(self, tmp_path):
        pixels = list(range(0, 256, 32)) + [255]
        img = write_idx(tmp_path / "img", 0x803, (2, 3, 3), pixels[:9] + pixels[:9][::-1])
        lab = write_idx(tmp_path / "lab", 0x801, (2,), [7, 3])
        d = dk.load_idx(img, lab)
        np.testing.assert_array_equal(d.images[0].ravel(), np.array(pixels[:9]) / 255.0)
        np.testing.assert_array_equal(d.labels, [7, 3])

    def test_round_trip_bytes(self, tmp_path):
        r = stream(0, "idx")
        raw = r.integers(0, 256, (5, 4, 6)).astype(np.uint8)
        d = dk.Dataset(raw / 255.0, r.integers(0, 10, 5))
        dk.save_idx(d, tmp_path / "i", tmp_path / "l")
        images, labels = dk.load_idx_bytes(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(images, raw)
        np.testing.assert_array_equal(labels, d.labels)
        again = dk.load_idx(tmp_path / "i", tmp_path / "l")
        dk.save_idx(again, tmp_path / "i2", tmp_path / "l2")
        assert (tmp_path / "i").read_bytes() == (tmp_path / "i2").read_bytes()

    def test_errors_are_distinct(self, tmp_path):
        good_img = write_idx(tmp_path / "img", 0x803, (2, 2, 2), range(8))
        good_lab = write_idx(tmp_path / "lab", 0x801, (2,), [0, 1])
        with pytest.raises(BadMagicError):
            dk.load_idx(write_idx(tmp_path / "bad", 0x801, (2, 2, 2), range(8)), good_lab)
        with pytest.raises(TruncatedPayloadError):
            dk.load_idx(write_idx(tmp_path / "short", 0x803, (2, 2, 2), range(7)), good_lab)
        with pytest.raises(TruncatedPayloadError):
            (tmp_path / "tiny").write_bytes(b"\x00\x00")
            dk.load_idx(tmp_path / "tiny", good_lab)
        with pytest.raises(CountMismatchError):
            dk.load_idx(good_img, write_idx(tmp_path / "lab3", 0x801, (3,), [0, 1, 2]))
        assert issubclass(BadMagicError, IdxFormatError)
        assert len({BadMagicError, TruncatedPayloadError, CountMismatchError}) == 3


class TestBatching:
    def test_whole_shard(self):
        b = dk.batch_indices(np.arange(5), 10, 0, 0, 0)
        assert len(b) == 1
        np.testing.assert_array_equal(np.sort(b[0]), np.arange(5))

    def test_epochs_differ(self):
        idx = np.arange(40)
        e0 = np.concatenate(dk.batch_indices(idx, 8, 1, 2, 0))
        e1 = np.concatenate(dk.batch_indices(idx, 8, 1, 2, 1))
        assert not np.array_equal(e0, e1)
        np.testing.assert_array_equal(np.sort(e0), np.sort(e1))

    def test_repeatable_and_short_tail(self):
        a = dk.batch_indices(np.arange(10), 4, 3, 1, 0)
        b = dk.batch_indices(np.arange(10), 4, 3, 1, 0)
        assert [len(x) for x in a] == [4, 4, 2]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_empty_and_invalid(self):
        assert dk.batch_indices([], 4, 0, 0, 0) == []
        with pytest.raises(InvalidParameterError):
            dk.batch_indices([1], 0, 0, 0, 0)

    def test_minibatches(self):
        d = dk.synthetic_classification(30, seed=0, image_size=3)
        got = list(dk.minibatches(d, np.arange(0, 30, 3), 4, 0, 0, 0))
        assert [x.shape[0] for x, _ in got] == [4, 4, 2]
        for x, y in got:
            assert x.shape[1:] == (3, 3)
