"""
Two-dimensional state-space scans.

roesser_scan_exact evaluates the time-invariant Roesser recurrence with
separate horizontal (h1) and vertical (h2) states. It is the verification
oracle and is not used on the model path.

The model path is the decomposed input-dependent scan: a selective scan
along one grid axis with a projected input matrix, whose per-position
outputs feed a second selective scan along the other axis with a unit
input matrix. The horizontal pipeline scans rows first, the vertical
pipeline columns first; ssm2d_forward sums the enabled pipelines.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

import autograd as ag
from autograd import Node
from numerics import ConfigError, DimensionError, Rng, Tensor
from scan1d import ScanOptions, SelectiveParams, init_selective_params, selective_scan


logger = logging.getLogger(__name__)

ROWS_THEN_COLS = 'rows_then_cols'
COLS_THEN_ROWS = 'cols_then_rows'


@dataclass
class Roesser2DParams:
    """Time-invariant Roesser model: A1..A4 (N, N), B1, B2 (N, 1), C1, C2 (1, N)."""

    A1: Tensor
    A2: Tensor
    A3: Tensor
    A4: Tensor
    B1: Tensor
    B2: Tensor
    C1: Tensor
    C2: Tensor

    @property
    def state_size(self) -> int:
        return self.A1.shape[0]


def random_roesser_params(rng: Rng, state_size: int, scale: float = 0.2,
                          decoupled: bool = False) -> Roesser2DParams:
    """
    Small random Roesser parameters.

    Args:
        rng: random stream
        state_size: N
        scale: entry std divided by sqrt(N), kept small so the grid recurrence stays bounded
        decoupled: zero A2 and A3

    Returns:
        Roesser2DParams in float64
    """
    n = state_size
    std = scale / np.sqrt(n)

    def mat(rows, cols):
        return rng.normal((rows, cols), 0.0, std)

    A2, A3 = mat(n, n), mat(n, n)
    if decoupled:
        A2, A3 = np.zeros((n, n)), np.zeros((n, n))
    return Roesser2DParams(A1=mat(n, n), A2=A2, A3=A3, A4=mat(n, n),
                           B1=rng.normal((n, 1)), B2=rng.normal((n, 1)),
                           C1=rng.normal((1, n)), C2=rng.normal((1, n)))


def roesser_scan_exact(x: Tensor, params: Roesser2DParams) -> Tensor:
    """
    Exact Roesser recurrence with zero boundary states.

    h1[i, j+1] = A1 h1[i, j] + A2 h2[i, j] + B1 x[i, j]
    h2[i+1, j] = A3 h1[i, j] + A4 h2[i, j] + B2 x[i, j]
    y[i, j]    = C1 h1[i, j] + C2 h2[i, j]

    Positions on one anti-diagonal i + j = d depend only on diagonal d - 1,
    so each diagonal is evaluated as one vectorized step.

    Args:
        x: (H, W) scalar input grid
        params: Roesser parameters

    Returns:
        y of shape (H, W), float64
    """
    if x.ndim != 2:
        raise DimensionError(f"roesser_scan_exact expects an (H, W) grid, got {x.shape}")
    H, W = x.shape
    n = params.state_size
    x = x.astype(np.float64)
    h1 = np.zeros((H, W + 1, n))
    h2 = np.zeros((H + 1, W, n))
    y = np.zeros((H, W))
    b1, b2 = params.B1[:, 0], params.B2[:, 0]
    c1, c2 = params.C1[0], params.C2[0]
    for d in range(H + W - 1):
        i = np.arange(max(0, d - W + 1), min(H, d + 1))
        j = d - i
        s1, s2 = h1[i, j], h2[i, j]                 # (P, N)
        xd = x[i, j][:, None]
        y[i, j] = s1 @ c1 + s2 @ c2
        h1[i, j + 1] = s1 @ params.A1.T + s2 @ params.A2.T + xd * b1
        h2[i + 1, j] = s1 @ params.A3.T + s2 @ params.A4.T + xd * b2
    return y


def roesser_scan_1d(x: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """
    Time-invariant 1D recurrence h_{t+1} = A h_t + B x_t, y_t = C h_t, h_0 = 0.

    Args:
        x: (L,) input
        A: (N, N), B: (N, 1), C: (1, N)

    Returns:
        y of shape (L,)
    """
    h = np.zeros(A.shape[0])
    y = np.zeros(x.shape[0])
    for t in range(x.shape[0]):
        y[t] = C[0] @ h
        h = A @ h + B[:, 0] * x[t]
    return y


# ---------------------------------------------------------------- decomposed scan

@dataclass
class Pipeline2DParams:
    """
    One decomposed pipeline.

    row_params drive the first scan (projected input matrix), col_params
    the second (unit input matrix). With order 'cols_then_rows' the first
    scan runs down the columns and the second along the rows.
    """

    row_params: SelectiveParams
    col_params: SelectiveParams
    order: str = ROWS_THEN_COLS

    def __post_init__(self):
        if self.order not in (ROWS_THEN_COLS, COLS_THEN_ROWS):
            raise ConfigError(f"unknown pipeline order '{self.order}'")

    def parameters(self) -> List[Node]:
        return self.row_params.parameters() + self.col_params.parameters()


def init_pipeline_params(rng: Rng, dim: int, state_size: int, prefix: str, order: str,
                         dtype=np.float32, init_scale: float = 1.0) -> Pipeline2DParams:
    """Fresh parameters for one pipeline; the second scan has no w_B."""
    return Pipeline2DParams(
        row_params=init_selective_params(rng, dim, state_size, f"{prefix}.first", True, dtype,
                                         init_scale=init_scale),
        col_params=init_selective_params(rng, dim, state_size, f"{prefix}.second", False, dtype,
                                         init_scale=init_scale),
        order=order,
    )


def _check_grid(x: Node):
    if x.value.ndim != 4:
        raise DimensionError(f"expected a (B, H, W, D) grid, got {x.shape}")


def scan_axis(x, params: SelectiveParams, along: str, b_mode: str,
              options: ScanOptions = ScanOptions()) -> Node:
    """
    Selective scan along one grid axis with the other axis fused into the batch.

    Args:
        x: (B, H, W, D)
        params: selective parameters
        along: 'rows' scans left to right within each row; 'cols' scans top to bottom
        b_mode: 'projected' or 'unit'
        options: scan options

    Returns:
        (B, H, W, D)
    """
    x = ag.constant(x)
    _check_grid(x)
    Bn, H, W, D = x.shape
    if along == 'rows':
        y = selective_scan(ag.reshape(x, (Bn * H, W, D)), params, b_mode, options)
        return ag.reshape(y, (Bn, H, W, D))
    if along == 'cols':
        xt = ag.transpose(x, (0, 2, 1, 3))
        y = selective_scan(ag.reshape(xt, (Bn * W, H, D)), params, b_mode, options)
        return ag.transpose(ag.reshape(y, (Bn, W, H, D)), (0, 2, 1, 3))
    raise ConfigError(f"unknown scan axis '{along}'")


def row_scan(x, p: SelectiveParams, options: ScanOptions = ScanOptions()) -> Node:
    """First-stage scan along rows, (B*H, W, D), projected input matrix."""
    return scan_axis(x, p, 'rows', 'projected', options)


def col_scan(x, p: SelectiveParams, options: ScanOptions = ScanOptions()) -> Node:
    """Second-stage scan down columns, (B*W, H, D), unit input matrix."""
    return scan_axis(x, p, 'cols', 'unit', options)


def pipeline_forward(x, pipeline: Pipeline2DParams, options: ScanOptions = ScanOptions()) -> Node:
    """Run one decomposed pipeline in its axis order."""
    first, second = ('rows', 'cols') if pipeline.order == ROWS_THEN_COLS else ('cols', 'rows')
    x_prime = scan_axis(x, pipeline.row_params, first, 'projected', options)
    return scan_axis(x_prime, pipeline.col_params, second, 'unit', options)


def ssm2d_forward(x, p_h: Pipeline2DParams, p_v: Pipeline2DParams,
                  pipelines: Sequence[str] = ('horizontal', 'vertical'),
                  options: ScanOptions = ScanOptions()) -> Node:
    """
    Sum of the enabled decomposed pipelines.

    Args:
        x: (B, H, W, D)
        p_h: horizontal pipeline (rows then columns)
        p_v: vertical pipeline (columns then rows)
        pipelines: subset of ('horizontal', 'vertical')
        options: scan options

    Returns:
        (B, H, W, D)
    """
    x = ag.constant(x)
    _check_grid(x)
    branches: List[Tuple[str, Pipeline2DParams]] = [('horizontal', p_h), ('vertical', p_v)]
    outputs = [pipeline_forward(x, p, options) for name, p in branches if name in pipelines]
    if not outputs:
        raise ConfigError("ssm2d_forward needs at least one pipeline")
    y = outputs[0]
    for extra in outputs[1:]:
        y = ag.add(y, extra)
    return y
