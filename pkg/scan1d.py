"""
One-dimensional selective state-space scan.

Input-dependent projections produce the timescale Delta and the input and
output matrices B and C at every step; zero-order hold turns the diagonal
evolution A into per-step decay factors; the affine recurrence
h_t = a_t * h_{t-1} + b_t is then solved either step by step or with a
work-parallel Blelloch tree over the monoid of affine maps.

Array layout: x is (G, L, D) with G a fused leading extent and L the
sequence length. States and discretized inputs are (G, L, D, N).
B and C are shared across channels, shape (G, L, N).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

import autograd as ag
import numerics
from autograd import Node, Parameter
from config import Config
from numerics import ContractError, DimensionError, Rng, Tensor


logger = logging.getLogger(__name__)

# Below this |Delta * A| the ZOH input factor uses its Taylor series.
SERIES_THRESHOLD = 1e-4
# Below this |z| the derivative of the ZOH input factor uses its series.
SERIES_GRAD_THRESHOLD = 1e-2


@dataclass
class SelectiveParams:
    """
    Parameters of one selective scan.

    a_log (D, N): A = -exp(a_log), diagonal per channel.
    w_B, w_C (D, N): input / output matrix projections; w_B is None for
        scans that always run with a unit input matrix.
    w_dt_down (D, R), w_dt_up (R, D): low-rank timescale projection.
    dt_bias (D,): learnable timescale bias p.
    """

    a_log: Node
    w_B: Optional[Node]
    w_C: Node
    w_dt_down: Node
    w_dt_up: Node
    dt_bias: Node

    @property
    def dim(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[1]

    def parameters(self) -> List[Node]:
        return [p for p in (self.a_log, self.w_B, self.w_C, self.w_dt_down,
                            self.w_dt_up, self.dt_bias) if p is not None]


@dataclass
class DiscreteScanInputs:
    """Per-step decay a_bar and injection bx, both (G, L, D, N)."""

    a_bar: Tensor
    bx: Tensor

    def __post_init__(self):
        if self.a_bar.shape != self.bx.shape or self.a_bar.ndim != 4:
            raise DimensionError(f"scan inputs must share a (G, L, D, N) shape, "
                                 f"got {self.a_bar.shape} and {self.bx.shape}")


@dataclass(frozen=True)
class ScanOptions:
    """How selective_scan solves its recurrence."""

    impl: str = 'sequential'
    workers: int = 1
    recompute: bool = False


def dt_rank(dim: int) -> int:
    """Rank of the timescale projection."""
    return max(1, dim // 16)


def init_selective_params(rng: Rng, dim: int, state_size: int, prefix: str,
                          with_b: bool = True, dtype=np.float32,
                          dt_min: float = 1e-3, dt_max: float = 0.1,
                          init_scale: float = 1.0) -> SelectiveParams:
    """
    Initialize a selective parameter set.

    a_log[d, n] = ln(n + 1); softplus(dt_bias) is log-uniform in
    [dt_min, dt_max]; projections are Gaussian with std init_scale/sqrt(fan_in).

    Args:
        rng: random stream
        dim: channels D
        state_size: state size N
        prefix: parameter name prefix
        with_b: allocate w_B (False for unit-input scans)
        dtype: parameter dtype
        dt_min: smallest initial timescale
        dt_max: largest initial timescale
        init_scale: multiplier on projection stds

    Returns:
        SelectiveParams of Parameters named '<prefix>.<field>'
    """
    rank = dt_rank(dim)
    a_log = np.tile(np.log(np.arange(1, state_size + 1, dtype=np.float64)), (dim, 1))
    std_in = init_scale / math.sqrt(dim)
    w_B = rng.normal((dim, state_size), 0.0, std_in) if with_b else None
    w_C = rng.normal((dim, state_size), 0.0, std_in)
    w_dt_down = rng.normal((dim, rank), 0.0, std_in)
    w_dt_up = rng.normal((rank, dim), 0.0, init_scale / math.sqrt(rank))
    dt = np.exp(rng.uniform((dim,), math.log(dt_min), math.log(dt_max)))
    dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus

    def param(value, field_name):
        return Parameter(value.astype(dtype), f"{prefix}.{field_name}")

    return SelectiveParams(
        a_log=param(a_log, 'a_log'),
        w_B=param(w_B, 'w_B') if with_b else None,
        w_C=param(w_C, 'w_C'),
        w_dt_down=param(w_dt_down, 'w_dt_down'),
        w_dt_up=param(w_dt_up, 'w_dt_up'),
        dt_bias=param(dt_bias, 'dt_bias'),
    )


def selective_project(x, params: SelectiveParams) -> Tuple[Node, Optional[Node], Node]:
    """
    Input-dependent Delta, B and C.

    Args:
        x: (G, L, D)
        params: selective parameters

    Returns:
        (delta (G, L, D), B (G, L, N) or None without w_B, C (G, L, N))
    """
    x = ag.constant(x)
    if x.value.ndim != 3 or x.shape[-1] != params.dim:
        raise DimensionError(f"selective_project: x {x.shape} does not match D={params.dim}")
    B = ag.linear(x, params.w_B) if params.w_B is not None else None
    C = ag.linear(x, params.w_C)
    dt_low = ag.linear(x, params.w_dt_down)
    delta = ag.softplus(ag.add(ag.linear(dt_low, params.w_dt_up), params.dt_bias))
    return delta, B, C


# ---------------------------------------------------------------- zero-order hold

def _phi(z: Tensor) -> Tensor:
    """(e^z - 1) / z with the series 1 + z/2 + z^2/6 near zero."""
    out = np.empty_like(z)
    small = np.abs(z) < SERIES_THRESHOLD
    big = ~small
    zb = z[big]
    out[big] = np.expm1(zb) / zb
    zs = z[small]
    out[small] = 1.0 + zs / 2 + zs * zs / 6
    return out


def _phi_grad(z: Tensor, a_bar: Optional[Tensor] = None, phi: Optional[Tensor] = None) -> Tensor:
    """d/dz of _phi; reuses exp(z) and _phi(z) when the caller has them."""
    out = np.empty_like(z)
    small = np.abs(z) < SERIES_GRAD_THRESHOLD
    big = ~small
    zb = z[big]
    if a_bar is None or phi is None:
        out[big] = (zb * np.exp(zb) - np.expm1(zb)) / (zb * zb)
    else:
        out[big] = (a_bar[big] - phi[big]) / zb
    zs = z[small]
    out[small] = 0.5 + zs / 3 + zs * zs / 8 + zs * zs * zs / 30
    return out


def _zoh_forward(delta: Tensor, A: Tensor, B: Optional[Tensor]):
    """float64 a_bar, b_bar plus the cached z and phi(z)."""
    d = delta.astype(np.float64)[..., None]            # (G, L, D, 1)
    z = d * A.astype(np.float64)                        # (G, L, D, N)
    a_bar = np.exp(z)
    phi = _phi(z)
    b = 1.0 if B is None else B.astype(np.float64)[:, :, None, :]
    b_bar = phi * d * b
    return a_bar, b_bar, z, phi


def _zoh_backward(delta: Tensor, A: Tensor, B: Optional[Tensor], z: Tensor, phi: Tensor,
                  a_bar: Tensor, g_abar: Tensor, g_bbar: Tensor):
    """Gradients of (a_bar, b_bar) with respect to (delta, A, B)."""
    d = delta.astype(np.float64)[..., None]
    A64 = A.astype(np.float64)
    b = 1.0 if B is None else B.astype(np.float64)[:, :, None, :]
    g_z = g_abar * a_bar + g_bbar * _phi_grad(z, a_bar, phi) * d * b
    g_delta = (g_z * A64 + g_bbar * phi * b).sum(axis=-1)
    g_A = (g_z * d).sum(axis=(0, 1))
    g_B = None if B is None else (g_bbar * phi * d).sum(axis=2)
    return g_delta, g_A, g_B


def _check_delta(delta: Tensor):
    if np.any(delta <= 0):
        raise ContractError("zoh_discretize: Delta must be strictly positive")


def zoh_discretize(delta, A, B=None) -> Tuple[Node, Node]:
    """
    Zero-order hold: a_bar = exp(Delta A), b_bar = ((exp(Delta A) - 1)/(Delta A)) Delta B.

    Args:
        delta: (G, L, D), strictly positive
        A: (D, N) diagonal evolution
        B: (G, L, N), or None for a unit input matrix

    Returns:
        (a_bar, b_bar), both (G, L, D, N)
    """
    delta, A = ag.constant(delta), ag.constant(A)
    B = ag.constant(B) if B is not None else None
    _check_delta(delta.value)
    dtype = numerics.result_dtype(delta.value, A.value, None if B is None else B.value)
    a_bar, b_bar, z, phi = _zoh_forward(delta.value, A.value, None if B is None else B.value)
    parents = (delta, A) if B is None else (delta, A, B)

    def rule_a(g):
        g_delta, g_A, g_B = _zoh_backward(delta.value, A.value, None if B is None else B.value,
                                          z, phi, a_bar, g.astype(np.float64), np.zeros_like(b_bar))
        grads = (g_delta.astype(delta.dtype), g_A.astype(A.dtype))
        return grads if B is None else grads + (g_B.astype(B.dtype),)

    def rule_b(g):
        g_delta, g_A, g_B = _zoh_backward(delta.value, A.value, None if B is None else B.value,
                                          z, phi, a_bar, np.zeros_like(a_bar), g.astype(np.float64))
        grads = (g_delta.astype(delta.dtype), g_A.astype(A.dtype))
        return grads if B is None else grads + (g_B.astype(B.dtype),)

    return (ag.make_node(a_bar.astype(dtype), parents, rule_a),
            ag.make_node(b_bar.astype(dtype), parents, rule_b))


# ---------------------------------------------------------------- recurrence

def combine(first: Tuple[Tensor, Tensor], second: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
    """
    Compose affine maps: apply first, then second.

    (a, b) o (a', b') = (a * a', a' * b + b')
    """
    a1, b1 = first
    a2, b2 = second
    return a1 * a2, a2 * b1 + b2


def _to_lanes(x: Tensor) -> Tensor:
    """(G, L, D, N) -> (L, G*D*N) float64."""
    G, L, D, N = x.shape
    return np.ascontiguousarray(x.astype(np.float64).transpose(1, 0, 2, 3).reshape(L, G * D * N))


def _from_lanes(x: Tensor, shape) -> Tensor:
    G, L, D, N = shape
    return np.ascontiguousarray(x.reshape(L, G, D, N).transpose(1, 0, 2, 3))


def _sequential_lanes(a: Tensor, b: Tensor, h0: Tensor) -> Tensor:
    h = np.empty_like(b)
    state = h0
    for t in range(a.shape[0]):
        state = a[t] * state + b[t]
        h[t] = state
    return h


def _blelloch_lanes(a: Tensor, b: Tensor, h0: Tensor) -> Tensor:
    """Inclusive scan of the affine monoid along axis 0, then applied to h0."""
    L, lanes = a.shape
    n = 1 << max(0, (L - 1).bit_length())
    A = np.ones((n, lanes))
    Bv = np.zeros((n, lanes))
    A[:L] = a
    Bv[:L] = b

    step = 1
    while step < n:
        right = np.arange(2 * step - 1, n, 2 * step)
        left = right - step
        A[right], Bv[right] = combine((A[left], Bv[left]), (A[right], Bv[right]))
        step *= 2

    A[n - 1] = 1.0
    Bv[n - 1] = 0.0
    step = n // 2
    while step >= 1:
        right = np.arange(2 * step - 1, n, 2 * step)
        left = right - step
        saved_a, saved_b = A[left], Bv[left]
        prefix_a, prefix_b = A[right], Bv[right]
        A[left], Bv[left] = prefix_a, prefix_b
        A[right], Bv[right] = combine((prefix_a, prefix_b), (saved_a, saved_b))
        step //= 2

    inc_a, inc_b = combine((A[:L], Bv[:L]), (a, b))
    if Config.fault_injection() == 'scan_sign':
        inc_b = -inc_b
    return inc_a * h0 + inc_b


def _run_lanes(kernel, a: Tensor, b: Tensor, h0: Tensor, workers: int) -> Tensor:
    """Split lanes into contiguous chunks, one per worker."""
    lanes = a.shape[1]
    if 0 < lanes < workers:
        logger.warning(f"{workers} workers requested for {lanes} lanes, using {lanes}")
    workers = max(1, min(workers, lanes))
    if workers == 1:
        return kernel(a, b, h0)
    bounds = np.linspace(0, lanes, workers + 1).astype(int)
    out = np.empty_like(b)

    def run(i):
        lo, hi = bounds[i], bounds[i + 1]
        out[:, lo:hi] = kernel(a[:, lo:hi], b[:, lo:hi], h0[lo:hi])

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(run, range(workers)))
    return out


def _initial_lanes(h0: Optional[Tensor], shape) -> Tensor:
    G, L, D, N = shape
    if h0 is None:
        return np.zeros(G * D * N)
    if h0.shape != (G, D, N):
        raise DimensionError(f"h0 must have shape {(G, D, N)}, got {h0.shape}")
    return h0.astype(np.float64).reshape(-1)


def _scan(kernel, inputs: DiscreteScanInputs, h0: Optional[Tensor], workers: int) -> Tensor:
    shape = inputs.a_bar.shape
    dtype = numerics.result_dtype(inputs.a_bar, inputs.bx)
    h = _run_lanes(kernel, _to_lanes(inputs.a_bar), _to_lanes(inputs.bx),
                   _initial_lanes(h0, shape), workers)
    return _from_lanes(h, shape).astype(dtype)


def scan_sequential(inputs: DiscreteScanInputs, h0: Optional[Tensor] = None,
                    workers: int = 1) -> Tensor:
    """
    h_t = a_bar_t * h_{t-1} + bx_t for t = 1..L, one step at a time.

    Args:
        inputs: discretized (G, L, D, N) inputs
        h0: (G, D, N) initial state, zeros when None
        workers: lane workers

    Returns:
        h of shape (G, L, D, N)
    """
    return _scan(_sequential_lanes, inputs, h0, workers)


def scan_parallel(inputs: DiscreteScanInputs, h0: Optional[Tensor] = None,
                  workers: int = 1) -> Tensor:
    """
    Same contract as scan_sequential, computed with a Blelloch tree per lane.

    Each lane's result depends only on its own tree, so output is bitwise
    independent of the worker count.
    """
    return _scan(_blelloch_lanes, inputs, h0, workers)


SCAN_KERNELS = {
    'sequential': _sequential_lanes,
    'parallel': _blelloch_lanes,
}


def _kernel(impl: str):
    try:
        return SCAN_KERNELS[impl]
    except KeyError:
        raise ContractError(f"unknown scan implementation '{impl}'")


def _adjoint(a_bar64: Tensor, g_h: Tensor, kernel, workers: int) -> Tensor:
    """lambda_t = g_h_t + a_{t+1} * lambda_{t+1}, solved as a reversed scan."""
    a_next = np.zeros_like(a_bar64)
    a_next[:, :-1] = a_bar64[:, 1:]
    rev = DiscreteScanInputs(a_next[:, ::-1], g_h[:, ::-1])
    lam = _run_lanes(kernel, _to_lanes(rev.a_bar), _to_lanes(rev.bx),
                     np.zeros(rev.a_bar.shape[0] * rev.a_bar.shape[2] * rev.a_bar.shape[3]),
                     workers)
    return _from_lanes(lam, a_bar64.shape)[:, ::-1]


def _previous_states(h: Tensor, h0: Optional[Tensor]) -> Tensor:
    prev = np.zeros_like(h)
    prev[:, 1:] = h[:, :-1]
    if h0 is not None:
        prev[:, 0] = h0
    return prev


def scan(a_bar, bx, h0=None, options: ScanOptions = ScanOptions()) -> Node:
    """
    Differentiable recurrence over (G, L, D, N) inputs.

    With options.recompute the node keeps only a_bar and bx and regenerates
    the hidden states when the backward pass needs them.
    """
    a_bar, bx = ag.constant(a_bar), ag.constant(bx)
    h0 = ag.constant(h0) if h0 is not None else None
    kernel = _kernel(options.impl)
    inputs = DiscreteScanInputs(a_bar.value, bx.value)
    h = _scan(kernel, inputs, None if h0 is None else h0.value, options.workers)
    kept = None if options.recompute else h.astype(np.float64)

    def rule(g):
        states = kept
        if states is None:
            states = _scan(kernel, inputs, None if h0 is None else h0.value,
                           options.workers).astype(np.float64)
        a64 = a_bar.value.astype(np.float64)
        lam = _adjoint(a64, g.astype(np.float64), kernel, options.workers)
        prev = _previous_states(states, None if h0 is None else h0.value.astype(np.float64))
        grads = ((lam * prev).astype(a_bar.dtype), lam.astype(bx.dtype))
        if h0 is not None:
            grads += ((a64[:, 0] * lam[:, 0]).astype(h0.dtype),)
        return grads

    parents = (a_bar, bx) if h0 is None else (a_bar, bx, h0)
    return ag.make_node(h, parents, rule)


# ---------------------------------------------------------------- fused selective scan

def _selective_core(delta: Node, A: Node, B: Optional[Node], C: Node, x: Node,
                    options: ScanOptions) -> Node:
    """
    Discretize, scan and read out y_t = sum_n C_t[n] h_t[:, n] in one node.

    Only the small (G, L, D) / (G, L, N) inputs are held by the node; the
    (G, L, D, N) intermediates are rebuilt in backward when options.recompute
    is set.
    """
    _check_delta(delta.value)
    kernel = _kernel(options.impl)
    B_val = None if B is None else B.value
    x64 = x.value.astype(np.float64)
    C64 = C.value.astype(np.float64)
    dtype = numerics.result_dtype(delta.value, A.value, B_val, C.value, x.value)

    def forward():
        a_bar, b_bar, z, phi = _zoh_forward(delta.value, A.value, B_val)
        bx = b_bar * x64[..., None]
        h = _scan(kernel, DiscreteScanInputs(a_bar, bx), None, options.workers).astype(np.float64)
        return a_bar, b_bar, z, phi, h

    cached = forward()
    y = np.einsum('gln,gldn->gld', C64, cached[4])
    if options.recompute:
        cached = None

    def rule(g):
        a_bar, b_bar, z, phi, h = cached if cached is not None else forward()
        g = g.astype(np.float64)
        g_C = np.einsum('gld,gldn->gln', g, h)
        g_h = g[..., None] * C64[:, :, None, :]
        lam = _adjoint(a_bar, g_h, kernel, options.workers)
        g_abar = lam * _previous_states(h, None)
        g_x = (lam * b_bar).sum(axis=-1)
        g_bbar = lam * x64[..., None]
        g_delta, g_A, g_B = _zoh_backward(delta.value, A.value, B_val, z, phi, a_bar, g_abar, g_bbar)
        grads = [g_delta.astype(delta.dtype), g_A.astype(A.dtype)]
        if B is not None:
            grads.append(g_B.astype(B.dtype))
        grads += [g_C.astype(C.dtype), g_x.astype(x.dtype)]
        return tuple(grads)

    parents = (delta, A, C, x) if B is None else (delta, A, B, C, x)
    return ag.make_node(y.astype(dtype), parents, rule)


def selective_scan(x, params: SelectiveParams, b_mode: str = 'projected',
                   options: ScanOptions = ScanOptions()) -> Node:
    """
    Selective SSM over the L axis of x.

    Args:
        x: (G, L, D)
        params: selective parameters
        b_mode: 'projected' uses B = x w_B; 'unit' uses an all-ones B
        options: scan implementation, workers and recomputation

    Returns:
        y of shape (G, L, D)
    """
    if b_mode not in ('projected', 'unit'):
        raise ContractError(f"unknown b_mode '{b_mode}'")
    x = ag.constant(x)
    delta, B, C = selective_project(x, params)
    if b_mode == 'unit':
        B = None
    elif B is None:
        raise ContractError("b_mode='projected' needs parameters with w_B")
    A = ag.neg(ag.exp(params.a_log))
    return _selective_core(delta, A, B, C, x, options)
