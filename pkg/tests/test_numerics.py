"""
Unit tests for the dense numeric kernels.

Tests linear, softplus, layer_norm, the activations, the seeded Rng and
the error hierarchy.
"""

import math
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

import numerics
from numerics import (ConfigError, ContractError, DimensionError, FormatError, NonFiniteError,
                      Rng, ShapeMismatchError, TruncatedPayloadError, V2MError, rng_normal)


class TestLinear(unittest.TestCase):
    """Test cases for the linear kernel."""

    def test_identity_weight(self):
        """Test identity weight and zero bias return the input."""
        y = numerics.linear(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(y, [[1.0, 2.0]])

    def test_hand_example(self):
        """Test [1, 1] . [[2], [3]] + 1 = 6."""
        y = numerics.linear(np.array([1.0, 1.0]), np.array([[2.0], [3.0]]), np.array([1.0]))
        np.testing.assert_array_equal(y, [6.0])

    def test_matches_triple_loop(self):
        """Test against an explicit triple loop."""
        rng = Rng(3)
        x, w, b = rng.normal((4, 5)), rng.normal((5, 3)), rng.normal((3,))
        expected = np.zeros((4, 3))
        for i in range(4):
            for o in range(3):
                expected[i, o] = b[o] + sum(x[i, k] * w[k, o] for k in range(5))
        np.testing.assert_allclose(numerics.linear(x, w, b), expected, rtol=0, atol=1e-12)

    def test_linearity(self):
        """Test linear(a x + b y) = a linear(x) + b linear(y) without bias."""
        rng = Rng(4)
        x, y, w = rng.normal((6, 4)), rng.normal((6, 4)), rng.normal((4, 2))
        lhs = numerics.linear(2.0 * x - 3.0 * y, w)
        rhs = 2.0 * numerics.linear(x, w) - 3.0 * numerics.linear(y, w)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_leading_axes_preserved(self):
        """Test arbitrary leading axes and dtype promotion."""
        x = np.ones((2, 3, 4), dtype=np.float32)
        y = numerics.linear(x, np.ones((4, 5), dtype=np.float32))
        self.assertEqual(y.shape, (2, 3, 5))
        self.assertEqual(y.dtype, np.float32)
        self.assertEqual(numerics.linear(x, np.ones((4, 5))).dtype, np.float64)

    def test_shape_errors(self):
        """Test incompatible weight and bias raise DimensionError."""
        with self.assertRaises(DimensionError):
            numerics.linear(np.ones((2, 3)), np.ones((4, 2)))
        with self.assertRaises(DimensionError):
            numerics.linear(np.ones((2, 3)), np.ones((3, 2)), np.ones(3))

    def test_non_finite_output(self):
        """Test overflow to infinity raises NonFiniteError."""
        with self.assertRaises(NonFiniteError):
            numerics.linear(np.array([1e308, 1e308]), np.array([[1e308], [1e308]]))


class TestActivations(unittest.TestCase):
    """Test cases for softplus, sigmoid, silu and gelu."""

    def test_softplus_examples(self):
        """Test softplus at 0, +50 and -50."""
        self.assertAlmostEqual(float(numerics.softplus(np.array(0.0))), math.log(2.0), places=15)
        self.assertEqual(float(numerics.softplus(np.array(50.0))), 50.0)
        tail = float(numerics.softplus(np.array(-50.0)))
        self.assertTrue(math.isclose(tail, math.exp(-50.0), rel_tol=1e-12))

    def test_softplus_no_overflow(self):
        """Test softplus stays finite far from zero."""
        y = numerics.softplus(np.array([-1e4, 1e4]))
        self.assertTrue(np.all(np.isfinite(y)))
        self.assertEqual(y[1], 1e4)

    def test_softplus_matches_naive(self):
        """Test agreement with log(1 + exp(x)) in the safe range."""
        x = np.linspace(-20, 20, 81)
        np.testing.assert_allclose(numerics.softplus(x), np.log1p(np.exp(x)), rtol=1e-14, atol=0)

    def test_sigmoid_and_silu(self):
        """Test sigmoid(0) = 0.5 and silu(x) = x * sigmoid(x)."""
        self.assertEqual(float(numerics.sigmoid(np.array(0.0))), 0.5)
        x = np.linspace(-5, 5, 11)
        np.testing.assert_allclose(numerics.silu(x), x / (1 + np.exp(-x)), rtol=1e-14)

    def test_gelu_grad(self):
        """Test gelu_grad against central differences."""
        x = np.linspace(-3, 3, 13)
        h = 1e-6
        numeric = (numerics.gelu(x + h) - numerics.gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(numerics.gelu_grad(x), numeric, rtol=0, atol=1e-8)


class TestLayerNorm(unittest.TestCase):
    """Test cases for layer_norm."""

    def test_symmetric_pair(self):
        """Test [-1, 1] normalizes to itself with unit gamma and tiny eps."""
        y = numerics.layer_norm(np.array([-1.0, 1.0]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(y, [-1.0, 1.0], rtol=0, atol=1e-10)

    def test_constant_input(self):
        """Test zero variance gives zeros plus beta."""
        y = numerics.layer_norm(np.array([1.0, 1.0, 1.0]), np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(y, np.zeros(3))
        y = numerics.layer_norm(np.full((2, 3), 7.0), np.ones(3), np.full(3, 0.5))
        np.testing.assert_array_equal(y, np.full((2, 3), 0.5))

    def test_standardized_statistics(self):
        """Test output rows have zero mean and unit variance."""
        x = Rng(1).normal((5, 16), mean=3.0, std=2.0)
        y = numerics.layer_norm(x, np.ones(16), np.zeros(16), eps=1e-12)
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-9)

    def test_shift_invariance(self):
        """Test adding a per-row constant leaves the output unchanged."""
        rng = Rng(2)
        x = rng.normal((4, 8))
        gamma, beta = rng.uniform((8,), 0.5, 1.5), rng.normal((8,))
        shift = rng.uniform((4, 1), -5.0, 5.0)
        np.testing.assert_allclose(numerics.layer_norm(x + shift, gamma, beta),
                                   numerics.layer_norm(x, gamma, beta), rtol=0, atol=1e-12)

    def test_empty_axis(self):
        """Test an empty last axis raises DimensionError."""
        with self.assertRaises(DimensionError):
            numerics.layer_norm(np.ones((2, 0)), np.ones(0), np.zeros(0))


class TestRng(unittest.TestCase):
    """Test cases for Rng and rng_normal."""

    def test_same_seed_same_draws(self):
        """Test two generators with one seed agree bitwise."""
        a = rng_normal(Rng(42), (100,))
        b = rng_normal(Rng(42), (100,))
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        """Test distinct seeds give distinct streams."""
        self.assertFalse(np.array_equal(Rng(1).normal((10,)), Rng(2).normal((10,))))

    def test_zero_std(self):
        """Test std = 0 returns the mean everywhere."""
        y = rng_normal(Rng(0), (3, 5), mean=2.5, std=0.0)
        np.testing.assert_array_equal(y, np.full((3, 5), 2.5))

    def test_negative_std(self):
        """Test negative std raises ContractError."""
        with self.assertRaises(ContractError):
            rng_normal(Rng(0), (2,), std=-1.0)

    def test_moments(self):
        """Test one million draws have mean and std within 5e-3."""
        z = rng_normal(Rng(7), (1_000_000,))
        self.assertLess(abs(float(z.mean())), 5e-3)
        self.assertLess(abs(float(z.std()) - 1.0), 5e-3)

    def test_odd_size_and_dtype(self):
        """Test odd element counts and f32 output."""
        z = rng_normal(Rng(0), (3, 3), dtype=np.float32)
        self.assertEqual(z.shape, (3, 3))
        self.assertEqual(z.dtype, np.float32)

    def test_spawn_independent_of_parent_draws(self):
        """Test spawned streams ignore draws made from the parent."""
        parent = Rng(5)
        first = parent.spawn('a').normal((4,))
        parent.normal((10,))
        np.testing.assert_array_equal(parent.spawn('a').normal((4,)), first)
        self.assertFalse(np.array_equal(parent.spawn('b').normal((4,)), first))

    def test_bad_seed(self):
        """Test negative seeds raise ConfigError."""
        with self.assertRaises(ConfigError):
            Rng(-1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 32), st.integers(min_value=0, max_value=50))
    def test_permutation_is_permutation(self, seed, n):
        """Test permutation returns every index exactly once."""
        self.assertEqual(sorted(Rng(seed).permutation(n).tolist()), list(range(n)))


class TestErrors(unittest.TestCase):
    """Test cases for the error hierarchy."""

    def test_hierarchy(self):
        """Test every error derives from V2MError."""
        for cls in (DimensionError, NonFiniteError, ContractError, ConfigError, FormatError,
                    TruncatedPayloadError):
            self.assertTrue(issubclass(cls, V2MError))
        self.assertTrue(issubclass(TruncatedPayloadError, FormatError))

    def test_format_error_names_path(self):
        """Test FormatError carries and prints the path."""
        e = FormatError("bad magic", path='/tmp/x.idx')
        self.assertEqual(e.path, '/tmp/x.idx')
        self.assertIn('/tmp/x.idx', str(e))

    def test_shape_mismatch_message(self):
        """Test ShapeMismatchError names the tensor and both shapes."""
        e = ShapeMismatchError('head.w', (4, 2), (4, 3))
        self.assertIn('head.w', str(e))
        self.assertEqual(e.found, (4, 3))
        self.assertIn('missing', str(ShapeMismatchError('head.b', (2,))))

    def test_as_dtype(self):
        """Test precision names map to dtypes."""
        self.assertIs(numerics.as_dtype('f32'), np.float32)
        self.assertIs(numerics.as_dtype('f64'), np.float64)
        with self.assertRaises(ConfigError):
            numerics.as_dtype('f16')


if __name__ == '__main__':
    unittest.main()
