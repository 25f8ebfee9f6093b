"""
Unit tests for four-direction expansion and aggregation.
"""

import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from directions import DirectionBatch, aggregate_directions, expand_directions, rot90
from numerics import DimensionError, Rng
from ssm2d import COLS_THEN_ROWS, ROWS_THEN_COLS, init_pipeline_params, ssm2d_forward


class TestRot90(unittest.TestCase):
    """Test cases for rot90."""

    def test_quarter_turn(self):
        """Test [[1, 2], [3, 4]] turns counterclockwise to [[2, 4], [1, 3]]."""
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        np.testing.assert_array_equal(rot90(x, 1)[0, :, :, 0], [[2.0, 4.0], [1.0, 3.0]])

    def test_index_formula(self):
        """Test out[i, j] = in[j, H - 1 - i] for one quarter turn."""
        x = Rng(1).normal((2, 5, 5, 3))
        y = rot90(x, 1)
        for i in range(5):
            for j in range(5):
                np.testing.assert_array_equal(y[:, i, j], x[:, j, 4 - i])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=3), st.integers(min_value=1, max_value=6))
    def test_inverse(self, k, side):
        """Test rotating by k then 4 - k restores the grid bitwise."""
        x = Rng(side).normal((1, side, side, 2))
        np.testing.assert_array_equal(rot90(rot90(x, k), (4 - k) % 4), x)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=3), st.integers(min_value=0, max_value=3))
    def test_group_law(self, a, b):
        """Test rot90(rot90(x, a), b) = rot90(x, (a + b) mod 4)."""
        x = Rng(a * 4 + b).normal((2, 3, 3, 1))
        np.testing.assert_array_equal(rot90(rot90(x, a), b), rot90(x, (a + b) % 4))

    def test_four_turns_identity(self):
        """Test four quarter turns are the identity."""
        x = Rng(2).normal((1, 4, 4, 2))
        y = x
        for _ in range(4):
            y = rot90(y, 1)
        np.testing.assert_array_equal(y, x)

    def test_errors(self):
        """Test non-square grids and bad indices raise DimensionError."""
        with self.assertRaises(DimensionError):
            rot90(np.zeros((1, 2, 3, 1)), 1)
        with self.assertRaises(DimensionError):
            rot90(np.zeros((1, 2, 2, 1)), 4)
        with self.assertRaises(DimensionError):
            rot90(np.zeros((2, 2, 1)), 1)


class TestExpandAggregate(unittest.TestCase):
    """Test cases for expand_directions and aggregate_directions."""

    def setUp(self):
        """Set up a random grid."""
        self.rng = Rng(3)
        self.x = self.rng.normal((2, 4, 4, 3))

    def test_expand_slices(self):
        """Test slice k of the expansion is rot90(x, k)."""
        batch = expand_directions(self.x)
        self.assertEqual(batch.z.shape, (8, 4, 4, 3))
        self.assertEqual(batch.batch, 2)
        for k in range(4):
            np.testing.assert_array_equal(batch.z.value[2 * k:2 * k + 2], rot90(self.x, k))

    def test_expand_constant_grid(self):
        """Test a rotation-invariant grid gives four identical slices."""
        batch = expand_directions(np.ones((1, 3, 3, 2)))
        for k in range(1, 4):
            np.testing.assert_array_equal(batch.z.value[k], batch.z.value[0])

    def test_expand_subset(self):
        """Test a direction subset keeps only those rotations, in order."""
        batch = expand_directions(self.x, (0, 2))
        self.assertEqual(batch.z.shape[0], 4)
        np.testing.assert_array_equal(batch.z.value[2:], rot90(self.x, 2))

    def test_identity_aggregation(self):
        """Test unprocessed expansion with identity projection gives exactly 4x."""
        y = aggregate_directions(expand_directions(self.x), np.eye(3)).value
        np.testing.assert_array_equal(y, 4.0 * self.x)

    def test_single_group(self):
        """Test three zeroed groups leave the derotated remaining group."""
        z = np.zeros((8, 4, 4, 3))
        group = self.rng.normal((2, 4, 4, 3))
        z[2:4] = group
        batch = DirectionBatch(None, (0, 1, 2, 3)).with_values(z)
        y = aggregate_directions(batch, np.eye(3)).value
        np.testing.assert_array_equal(y, rot90(group, 3))

    def test_against_direct_composition(self):
        """Test aggregation against derotate, sum and matmul written out."""
        z = self.rng.normal((8, 4, 4, 3))
        w = self.rng.normal((3, 3))
        y = aggregate_directions(DirectionBatch(None).with_values(z), w).value
        expected = sum(np.rot90(z[2 * k:2 * k + 2], -k, axes=(1, 2)) for k in range(4)) @ w
        np.testing.assert_allclose(y, expected, rtol=0, atol=1e-12)

    def test_f32_dtype(self):
        """Test f32 groups aggregate to f32."""
        x = self.x.astype(np.float32)
        y = aggregate_directions(expand_directions(x), np.eye(3, dtype=np.float32))
        self.assertEqual(y.dtype, np.float32)
        np.testing.assert_array_equal(y.value, 4.0 * x)

    def test_indivisible_extent(self):
        """Test a leading extent not divisible by the group count raises DimensionError."""
        with self.assertRaises(DimensionError):
            aggregate_directions(DirectionBatch(None).with_values(np.zeros((6, 2, 2, 1))), np.eye(1))


class TestEquivariance(unittest.TestCase):
    """Test cases for quarter-turn equivariance of the four-direction 2D scan."""

    def setUp(self):
        """Set up shared 2D scan parameters."""
        rng = Rng(4)
        self.p_h = init_pipeline_params(rng, 3, 2, 'h', ROWS_THEN_COLS, dtype=np.float64)
        self.p_v = init_pipeline_params(rng, 3, 2, 'v', COLS_THEN_ROWS, dtype=np.float64)
        self.w_out = rng.normal((3, 3))
        self.x = rng.normal((1, 5, 5, 3))

    def forward(self, x):
        batch = expand_directions(x)
        y = ssm2d_forward(batch.z, self.p_h, self.p_v)
        return aggregate_directions(batch.with_values(y), self.w_out).value

    def test_rotation_commutes(self):
        """Test F(rot90(x, k)) = rot90(F(x), k) for every k."""
        fx = self.forward(self.x)
        for k in range(1, 4):
            np.testing.assert_allclose(self.forward(rot90(self.x, k)), rot90(fx, k), rtol=0, atol=1e-10)

    def test_single_direction_not_equivariant(self):
        """Test one direction alone breaks the symmetry."""
        def one_way(x):
            batch = expand_directions(x, (0,))
            y = ssm2d_forward(batch.z, self.p_h, self.p_v)
            return aggregate_directions(batch.with_values(y), self.w_out).value

        self.assertFalse(np.allclose(one_way(rot90(self.x, 1)), rot90(one_way(self.x), 1)))


if __name__ == '__main__':
    unittest.main()
