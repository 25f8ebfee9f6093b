"""
Four-direction expansion and aggregation of token grids.

A grid is rotated counterclockwise by 0, 1, 2 and 3 quarter turns, the
rotated copies are concatenated along the batch axis so one shared set
of parameters processes all of them, and the processed copies are rotated
back, summed and projected.

Rotation index k carries the grid's upper-left origin to the corner
DIRECTION_NAMES[k]: 0 UL, 1 LL, 2 LR, 3 UR.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

import autograd as ag
from autograd import Node
from numerics import DimensionError, Tensor


logger = logging.getLogger(__name__)

DIRECTION_NAMES = ('UL', 'LL', 'LR', 'UR')
ALL_DIRECTIONS = (0, 1, 2, 3)


def _check_square(shape: Tuple[int, ...]):
    if len(shape) != 4:
        raise DimensionError(f"expected a (B, H, W, D) grid, got {shape}")
    if shape[1] != shape[2]:
        raise DimensionError(f"rotation needs a square grid, got {shape[1]}x{shape[2]}")


def rot90(x, k: int):
    """
    Rotate the (H, W) axes counterclockwise by k quarter turns.

    For k = 1, out[i, j] = in[j, H - 1 - i].

    Args:
        x: (B, H, W, D) array or Node
        k: 0..3

    Returns:
        Same type as x
    """
    _check_square(tuple(x.shape))
    if k not in ALL_DIRECTIONS:
        raise DimensionError(f"rotation index must be in 0..3, got {k}")
    if isinstance(x, Node):
        return ag.rot90(x, k, axes=(1, 2))
    return np.ascontiguousarray(np.rot90(x, k, axes=(1, 2)))


@dataclass
class DirectionBatch:
    """Rotated copies fused along the batch axis: z is (len(directions) * B, H, W, D)."""

    z: Node
    directions: Tuple[int, ...] = ALL_DIRECTIONS

    @property
    def batch(self) -> int:
        return self.z.shape[0] // len(self.directions)

    def with_values(self, z) -> 'DirectionBatch':
        """Same layout carrying processed values."""
        return DirectionBatch(ag.constant(z), self.directions)


def expand_directions(x, directions: Sequence[int] = ALL_DIRECTIONS) -> DirectionBatch:
    """
    Concatenate rot90(x, k) for each k in directions along the batch axis.

    Args:
        x: (B, H, W, D), H == W
        directions: rotation indices, in order

    Returns:
        DirectionBatch
    """
    x = ag.constant(x)
    _check_square(x.shape)
    directions = tuple(directions)
    rotated = [ag.rot90(x, k, axes=(1, 2)) if k else x for k in directions]
    z = rotated[0] if len(rotated) == 1 else ag.concat(rotated, axis=0)
    return DirectionBatch(z, directions)


def aggregate_directions(z_out: DirectionBatch, w_out) -> Node:
    """
    Rotate each group back to the original frame, sum, and project with w_out.

    Args:
        z_out: processed DirectionBatch
        w_out: (D, D) projection applied per position

    Returns:
        (B, H, W, D)
    """
    z = ag.constant(z_out.z)
    groups = len(z_out.directions)
    if z.shape[0] % groups:
        raise DimensionError(f"leading extent {z.shape[0]} not divisible by {groups} directions")
    b = z_out.batch
    dtype = z.dtype
    total = None
    for g, k in enumerate(z_out.directions):
        part = ag.take(z, slice(g * b, (g + 1) * b)) if groups > 1 else z
        if k:
            part = ag.rot90(part, 4 - k, axes=(1, 2))
        # f32 groups sum exactly in f64
        part = ag.astype(part, np.float64)
        total = part if total is None else ag.add(total, part)
    return ag.astype(ag.linear(total, w_out), dtype)
