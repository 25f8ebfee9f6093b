"""
Unit tests for the data sources.

Tests the synthetic locality task, IDX reading and writing, and the
background batch producer.
"""

import os
import struct
import tempfile
import unittest
from dataclasses import replace

import numpy as np

from data import (BatchProducer, LabeledSamples, LocalityTaskSpec, generate_locality_dataset,
                  iterate_batches, load_idx, split_holdout, write_idx)
from numerics import ConfigError, CountMismatchError, FormatError, Rng, TruncatedPayloadError


CLEAN = LocalityTaskSpec(image_size=8, blob_size=2, noise_std=0.0, distractors=0, n_train=40, n_test=12)


class TestLocalityTask(unittest.TestCase):
    """Test cases for generate_locality_dataset."""

    def test_clean_blob(self):
        """Test zero noise gives exactly one blob of blob_size^2 bright pixels."""
        train, _ = generate_locality_dataset(CLEAN)
        counts = np.sum(train.images == 1.0, axis=(1, 2, 3))
        np.testing.assert_array_equal(counts, np.full(len(train), 4))
        self.assertEqual(float(train.images.sum()), 4.0 * len(train))

    def test_label_is_quadrant(self):
        """Test the blob lies in the quadrant named by the label."""
        train, _ = generate_locality_dataset(CLEAN)
        for image, label in zip(train.images, train.labels):
            rows, cols = np.nonzero(image[:, :, 0])
            self.assertTrue(np.all(rows // 4 == label // 2))
            self.assertTrue(np.all(cols // 4 == label % 2))

    def test_deterministic(self):
        """Test one seed gives bitwise identical datasets."""
        spec = replace(CLEAN, noise_std=0.1, distractors=3)
        a_train, a_test = generate_locality_dataset(spec)
        b_train, b_test = generate_locality_dataset(spec)
        np.testing.assert_array_equal(a_train.images, b_train.images)
        np.testing.assert_array_equal(a_test.labels, b_test.labels)
        c_train, _ = generate_locality_dataset(replace(spec, seed=1))
        self.assertFalse(np.array_equal(a_train.images, c_train.images))

    def test_value_range(self):
        """Test noisy images stay within [0, 1]."""
        train, test = generate_locality_dataset(replace(CLEAN, noise_std=0.5, distractors=5))
        for split in (train, test):
            self.assertGreaterEqual(float(split.images.min()), 0.0)
            self.assertLessEqual(float(split.images.max()), 1.0)
        self.assertEqual(train.images.shape, (40, 8, 8, 1))
        self.assertEqual(len(test), 12)

    def test_class_balance(self):
        """Test 10000 samples are balanced to within one per class."""
        spec = LocalityTaskSpec(image_size=4, blob_size=1, noise_std=0.0, distractors=0, n_train=10000, n_test=1)
        train, _ = generate_locality_dataset(spec)
        histogram = np.bincount(train.labels, minlength=4)
        self.assertLessEqual(int(histogram.max() - histogram.min()), 1)

    def test_invalid_spec(self):
        """Test impossible task settings raise ConfigError."""
        for bad in ({'blob_size': 5}, {'image_size': 7}, {'num_classes': 10}, {'noise_std': -1.0},
                    {'blob_value': 0.0}):
            with self.assertRaises(ConfigError):
                generate_locality_dataset(replace(CLEAN, **bad))


class TestIdx(unittest.TestCase):
    """Test cases for the IDX reader and writer."""

    def setUp(self):
        """Set up a temporary directory."""
        self.tmp = tempfile.TemporaryDirectory()
        self.images = os.path.join(self.tmp.name, 'images.idx')
        self.labels = os.path.join(self.tmp.name, 'labels.idx')

    def tearDown(self):
        """Clean up the temporary directory."""
        self.tmp.cleanup()

    def write(self, path, data):
        with open(path, 'wb') as f:
            f.write(data)

    def test_hand_written_fixture(self):
        """Test a hand-built two-image file."""
        self.write(self.images, struct.pack('>IIII', 0x803, 2, 2, 2) + bytes([0, 255, 51, 102, 1, 2, 3, 4]))
        self.write(self.labels, struct.pack('>II', 0x801, 2) + bytes([3, 7]))
        samples = load_idx(self.images, self.labels)
        self.assertEqual(samples.images.shape, (2, 2, 2, 1))
        self.assertEqual(samples.images[0, 0, 1, 0], 1.0)
        self.assertEqual(samples.images[0, 1, 0, 0], 51 / 255.0)
        np.testing.assert_array_equal(samples.labels, [3, 7])
        self.assertEqual(samples.labels.dtype, np.int64)

    def test_write_then_read(self):
        """Test write_idx output is read back exactly."""
        pixels = Rng(1).integers(0, 256, (5, 3, 4)).astype(np.uint8)
        labels = np.array([0, 1, 2, 3, 9])
        write_idx(self.images, self.labels, pixels, labels)
        samples = load_idx(self.images, self.labels)
        np.testing.assert_array_equal(np.round(samples.images[..., 0] * 255).astype(np.uint8), pixels)
        np.testing.assert_array_equal(samples.labels, labels)

    def test_count_mismatch(self):
        """Test differing image and label counts raise CountMismatchError."""
        write_idx(self.images, self.labels, np.zeros((3, 2, 2)), np.zeros(3))
        self.write(self.labels, struct.pack('>II', 0x801, 2) + bytes([0, 1]))
        with self.assertRaises(CountMismatchError):
            load_idx(self.images, self.labels)

    def test_bad_magic(self):
        """Test a wrong magic number raises FormatError naming the file."""
        self.write(self.images, struct.pack('>IIII', 0x802, 1, 1, 1) + bytes([0]))
        self.write(self.labels, struct.pack('>II', 0x801, 1) + bytes([0]))
        with self.assertRaises(FormatError) as ctx:
            load_idx(self.images, self.labels)
        self.assertEqual(ctx.exception.path, self.images)
        self.assertIn(self.images, str(ctx.exception))

    def test_truncated_payload(self):
        """Test a short payload raises TruncatedPayloadError."""
        self.write(self.images, struct.pack('>IIII', 0x803, 2, 2, 2) + bytes(5))
        self.write(self.labels, struct.pack('>II', 0x801, 2) + bytes(2))
        with self.assertRaises(TruncatedPayloadError):
            load_idx(self.images, self.labels)

    def test_truncated_header(self):
        """Test a file shorter than its header raises TruncatedPayloadError."""
        self.write(self.images, struct.pack('>II', 0x803, 2))
        self.write(self.labels, struct.pack('>II', 0x801, 2) + bytes(2))
        with self.assertRaises(TruncatedPayloadError):
            load_idx(self.images, self.labels)


class TestSamples(unittest.TestCase):
    """Test cases for LabeledSamples and split_holdout."""

    def test_count_check(self):
        """Test mismatched arrays raise CountMismatchError."""
        with self.assertRaises(CountMismatchError):
            LabeledSamples(np.zeros((3, 2, 2, 1)), np.zeros(2, dtype=np.int64))

    def test_holdout(self):
        """Test the trailing fraction becomes the held-out split."""
        samples = LabeledSamples(np.zeros((10, 2, 2, 1)), np.arange(10))
        train, test = split_holdout(samples, 0.2)
        np.testing.assert_array_equal(train.labels, np.arange(8))
        np.testing.assert_array_equal(test.labels, [8, 9])


class TestBatches(unittest.TestCase):
    """Test cases for iterate_batches and BatchProducer."""

    def setUp(self):
        """Set up labelled samples whose pixels encode their index."""
        n = 10
        images = np.zeros((n, 2, 2, 1))
        images[:, 0, 0, 0] = np.arange(n)
        self.samples = LabeledSamples(images, np.arange(n))

    def test_sequential_order(self):
        """Test rng = None yields samples in order with a short last batch."""
        batches = list(iterate_batches(self.samples, 4))
        self.assertEqual([len(labels) for _, labels in batches], [4, 4, 2])
        np.testing.assert_array_equal(np.concatenate([labels for _, labels in batches]), np.arange(10))
        self.assertEqual(batches[0][0].dtype, np.float32)

    def test_shuffled_once_each(self):
        """Test a shuffled pass visits every sample exactly once."""
        labels = np.concatenate([b for _, b in iterate_batches(self.samples, 3, Rng(1))])
        self.assertEqual(sorted(labels.tolist()), list(range(10)))

    def test_seeded_order(self):
        """Test one seed gives the same order and images follow their labels."""
        first = [b.tolist() for _, b in iterate_batches(self.samples, 3, Rng(5))]
        second = [b.tolist() for _, b in iterate_batches(self.samples, 3, Rng(5))]
        self.assertEqual(first, second)
        for images, labels in iterate_batches(self.samples, 3, Rng(5), dtype=np.float64):
            np.testing.assert_array_equal(images[:, 0, 0, 0], labels)

    def test_flip_augmentation(self):
        """Test flips mirror columns and keep labels."""
        images = np.zeros((64, 2, 2, 1))
        images[:, :, 0, 0] = 1.0
        samples = LabeledSamples(images, np.arange(64))
        flipped = 0
        for batch, labels in iterate_batches(samples, 16, Rng(2), augment_flip=True, dtype=np.float64):
            left = batch[:, 0, 0, 0] == 1.0
            right = batch[:, 0, 1, 0] == 1.0
            self.assertTrue(np.all(left != right))
            flipped += int(np.sum(right))
        self.assertGreater(flipped, 0)
        self.assertLess(flipped, 64)

    def test_early_close_stops_thread(self):
        """Test abandoning the iteration stops the producer thread."""
        producer = iterate_batches(self.samples, 1, prefetch=1)
        it = iter(producer)
        next(it)
        it.close()
        self.assertFalse(producer.thread.is_alive())

    def test_producer_error_reraised(self):
        """Test an exception in the producer reaches the consumer."""
        producer = BatchProducer(self.samples, 2, np.array([0, 99]))
        with self.assertRaises(IndexError):
            list(producer)


if __name__ == '__main__':
    unittest.main()
