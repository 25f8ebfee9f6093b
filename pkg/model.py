"""
V2M classifier assembly.

patch_embed -> insert_class_tokens -> K x v2m_block_forward -> layer_norm
-> extract_class_feature -> linear head.

Each block is pre-norm residual: the normalized grid is expanded over the
enabled rotation directions, mixed by the 2D selective scan (gated by a
x*sigmoid(x) branch of the same normalized input), aggregated back to the
original frame through w_out, and followed by a GELU MLP.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import autograd as ag
from autograd import Node, Parameter
from directions import ALL_DIRECTIONS, aggregate_directions, expand_directions
from numerics import ConfigError, ContractError, DimensionError, Rng, Tensor, as_dtype
from scan1d import ScanOptions, SelectiveParams, dt_rank, init_selective_params, selective_scan
from ssm2d import (COLS_THEN_ROWS, ROWS_THEN_COLS, Pipeline2DParams, init_pipeline_params,
                   ssm2d_forward)


logger = logging.getLogger(__name__)

MEAN_POOL = 'mean'
EDGE_CROSS = 'edge'
CENTER_CROSS = 'center'
CLS_SCHEMES = (MEAN_POOL, EDGE_CROSS, CENTER_CROSS)

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Shape and behaviour of a V2M classifier."""

    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    dim: int = 32
    state_size: int = 8
    depth: int = 4
    mlp_ratio: int = 4
    num_classes: int = 4
    cls_scheme: str = CENTER_CROSS
    directions: Tuple[int, ...] = ALL_DIRECTIONS
    pipelines: Tuple[str, ...] = ('horizontal', 'vertical')
    mixer: str = '2d'
    precision: str = 'f32'
    scan_impl: str = 'sequential'
    workers: int = 1
    recompute: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.cls_scheme not in CLS_SCHEMES:
            raise ConfigError(f"unknown class token scheme '{self.cls_scheme}'")
        if not self.directions or any(k not in ALL_DIRECTIONS for k in self.directions):
            raise ConfigError(f"directions must be a non-empty subset of 0..3, got {self.directions}")
        if self.mixer not in ('2d', 'flatten'):
            raise ConfigError(f"unknown mixer '{self.mixer}'")
        if self.mixer == '2d' and (not self.pipelines or
                                   set(self.pipelines) - {'horizontal', 'vertical'}):
            raise ConfigError(f"pipelines must be a non-empty subset of horizontal/vertical, got {self.pipelines}")
        as_dtype(self.precision)

    @property
    def grid(self) -> int:
        """Patch grid side M."""
        return self.image_size // self.patch_size

    @property
    def padded_grid(self) -> int:
        """Grid side after class token insertion."""
        return self.grid + (0 if self.cls_scheme == MEAN_POOL else 1)

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim

    @property
    def dtype(self):
        return as_dtype(self.precision)

    @property
    def scan_options(self) -> ScanOptions:
        return ScanOptions(self.scan_impl, self.workers, self.recompute)


@dataclass
class V2MBlockParams:
    """Parameters of one V2M block."""

    norm1_gamma: Node
    norm1_beta: Node
    gate_w: Node
    gate_b: Node
    w_out: Node
    norm2_gamma: Node
    norm2_beta: Node
    fc1_w: Node
    fc1_b: Node
    fc2_w: Node
    fc2_b: Node
    p_h: Optional[Pipeline2DParams] = None
    p_v: Optional[Pipeline2DParams] = None
    flat: Optional[SelectiveParams] = None


class ModelParams:
    """All parameters of a model, addressable by name and by structure."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.tensors: 'OrderedDict[str, Parameter]' = OrderedDict()
        self.blocks: List[V2MBlockParams] = []

    def add(self, name: str, value: Tensor) -> Parameter:
        p = Parameter(value.astype(self.config.dtype), name)
        self.tensors[name] = p
        return p

    def adopt(self, params: Sequence[Node]):
        for p in params:
            self.tensors[p.name] = p

    def __getitem__(self, name: str) -> Parameter:
        return self.tensors[name]

    def get(self, name: str) -> Optional[Parameter]:
        return self.tensors.get(name)

    def named(self) -> Dict[str, Parameter]:
        return self.tensors

    def values(self) -> Dict[str, Tensor]:
        """Name -> array snapshot references (not copies)."""
        return OrderedDict((name, p.value) for name, p in self.tensors.items())

    def rebind(self, leaves: Dict[str, Node]) -> 'ModelParams':
        """Same structure with every parameter swapped for leaves[name]."""
        bound = ModelParams(self.config)
        bound.tensors = OrderedDict((name, leaves[name]) for name in self.tensors)

        def swap_selective(sp: Optional[SelectiveParams]) -> Optional[SelectiveParams]:
            if sp is None:
                return None
            return SelectiveParams(*(None if p is None else leaves[p.name] for p in
                                     (sp.a_log, sp.w_B, sp.w_C, sp.w_dt_down, sp.w_dt_up, sp.dt_bias)))

        def swap_pipeline(pp: Optional[Pipeline2DParams]) -> Optional[Pipeline2DParams]:
            if pp is None:
                return None
            return Pipeline2DParams(swap_selective(pp.row_params), swap_selective(pp.col_params), pp.order)

        for block in self.blocks:
            tensors = {f.name: leaves[getattr(block, f.name).name] for f in fields(V2MBlockParams)
                       if f.name not in ('p_h', 'p_v', 'flat')}
            bound.blocks.append(V2MBlockParams(p_h=swap_pipeline(block.p_h), p_v=swap_pipeline(block.p_v),
                                               flat=swap_selective(block.flat), **tensors))
        return bound


def init_model(config: ModelConfig, seed: int = 0, init_scale: float = 1.0,
               zero_out: bool = True) -> ModelParams:
    """
    Initialize every parameter of the model.

    Args:
        config: model configuration
        seed: master seed
        init_scale: multiplier on projection stds
        zero_out: zero the block output projections so blocks start as identity

    Returns:
        ModelParams
    """
    rng = Rng(seed).spawn('init')
    D, N, P, c = config.dim, config.state_size, config.patch_size, config.channels
    M, C, Hd = config.grid, config.num_classes, config.hidden
    params = ModelParams(config)

    def gauss(shape, fan_in):
        return rng.normal(shape, 0.0, init_scale / math.sqrt(fan_in))

    params.add('patch_embed.weight', gauss((P * P * c, D), P * P * c))
    params.add('patch_embed.bias', np.zeros(D))
    params.add('pos_embed', rng.normal((M, M, D), 0.0, 0.02 * init_scale))
    if config.cls_scheme != MEAN_POOL:
        params.add('cls_token', rng.normal((D,), 0.0, 0.02 * init_scale))

    for k in range(config.depth):
        prefix = f"blocks.{k}"
        block = V2MBlockParams(
            norm1_gamma=params.add(f"{prefix}.norm1.gamma", np.ones(D)),
            norm1_beta=params.add(f"{prefix}.norm1.beta", np.zeros(D)),
            gate_w=params.add(f"{prefix}.gate.weight", gauss((D, D), D)),
            gate_b=params.add(f"{prefix}.gate.bias", np.zeros(D)),
            w_out=params.add(f"{prefix}.out.weight",
                             np.zeros((D, D)) if zero_out else gauss((D, D), D)),
            norm2_gamma=params.add(f"{prefix}.norm2.gamma", np.ones(D)),
            norm2_beta=params.add(f"{prefix}.norm2.beta", np.zeros(D)),
            fc1_w=params.add(f"{prefix}.mlp.fc1.weight", gauss((D, Hd), D)),
            fc1_b=params.add(f"{prefix}.mlp.fc1.bias", np.zeros(Hd)),
            fc2_w=params.add(f"{prefix}.mlp.fc2.weight", gauss((Hd, D), Hd)),
            fc2_b=params.add(f"{prefix}.mlp.fc2.bias", np.zeros(D)),
        )
        if config.mixer == 'flatten':
            block.flat = init_selective_params(rng, D, N, f"{prefix}.flat", True, config.dtype,
                                               init_scale=init_scale)
            params.adopt(block.flat.parameters())
        else:
            if 'horizontal' in config.pipelines:
                block.p_h = init_pipeline_params(rng, D, N, f"{prefix}.h", ROWS_THEN_COLS,
                                                 config.dtype, init_scale)
                params.adopt(block.p_h.parameters())
            if 'vertical' in config.pipelines:
                block.p_v = init_pipeline_params(rng, D, N, f"{prefix}.v", COLS_THEN_ROWS,
                                                 config.dtype, init_scale)
                params.adopt(block.p_v.parameters())
        params.blocks.append(block)

    params.add('norm.gamma', np.ones(D))
    params.add('norm.beta', np.zeros(D))
    params.add('head.weight', gauss((D, C), D) * 0.1)
    params.add('head.bias', np.zeros(C))
    logger.debug(f"Initialized {len(params.tensors)} tensors, {count_parameters(params)} parameters")
    return params


# ---------------------------------------------------------------- audit

def count_parameters(params: ModelParams) -> int:
    """Number of scalar parameters actually allocated."""
    return int(sum(p.value.size for p in params.tensors.values()))


def parameter_count_formula(config: ModelConfig) -> int:
    """
    Closed-form parameter count.

    first scan  = 3DN + 2DR + D   (a_log, w_B, w_C, dt projections, dt bias)
    second scan = 2DN + 2DR + D   (no w_B)
    block       = 2D + (D^2 + D) + mixer + D^2 + 2D + (D*Hd + Hd) + (Hd*D + D)
    total       = (P^2 c D + D) + M^2 D + [D] + K*block + 2D + (D C + C)
    """
    D, N, R = config.dim, config.state_size, dt_rank(config.dim)
    P, c, M, C, Hd = config.patch_size, config.channels, config.grid, config.num_classes, config.hidden
    first = 3 * D * N + 2 * D * R + D
    second = 2 * D * N + 2 * D * R + D
    mixer = first if config.mixer == 'flatten' else len(config.pipelines) * (first + second)
    block = 2 * D + (D * D + D) + mixer + D * D + 2 * D + (D * Hd + Hd) + (Hd * D + D)
    cls = 0 if config.cls_scheme == MEAN_POOL else D
    return (P * P * c * D + D) + M * M * D + cls + config.depth * block + 2 * D + (D * C + C)


def estimate_flops(config: ModelConfig) -> int:
    """Multiply-accumulate count of one forward pass for one image."""
    D, N, R = config.dim, config.state_size, dt_rank(config.dim)
    P, c, M, C, Hd = config.patch_size, config.channels, config.grid, config.num_classes, config.hidden
    T = config.padded_grid ** 2
    Dn = len(config.directions)
    projected = D * N * 2 + 2 * D * R       # B, C and dt projections per token
    unit = D * N + 2 * D * R
    recurrence = 3 * D * N                   # discretize, update, readout
    if config.mixer == 'flatten':
        mixer = Dn * T * (projected + recurrence)
    else:
        mixer = len(config.pipelines) * Dn * T * (projected + unit + 2 * recurrence)
    block = T * D * D + mixer + Dn * T * D + T * D * D + 2 * T * D * Hd
    return M * M * P * P * c * D + config.depth * block + D * C


# ---------------------------------------------------------------- forward pieces

def patch_embed(image: Tensor, weight, bias, pos, patch_size: int) -> Node:
    """
    Non-overlapping patches, flattened in (row, column, channel) order,
    projected to D channels plus a learned 2D position embedding.

    Args:
        image: (B, h, w, c) with h == w divisible by patch_size
        weight: (P*P*c, D)
        bias: (D,)
        pos: (M, M, D)
        patch_size: P

    Returns:
        (B, M, M, D)
    """
    if image.ndim != 4 or image.shape[1] != image.shape[2]:
        raise DimensionError(f"patch_embed expects a square (B, h, w, c) image, got {image.shape}")
    Bn, h, _, c = image.shape
    P = patch_size
    if h % P:
        raise DimensionError(f"image side {h} not divisible by patch size {P}")
    M = h // P
    patches = (image.reshape(Bn, M, P, M, P, c).transpose(0, 1, 3, 2, 4, 5)
               .reshape(Bn, M, M, P * P * c))
    weight = ag.constant(weight)
    patches = np.ascontiguousarray(patches).astype(weight.dtype)
    return ag.add(ag.linear(patches, weight, bias), pos)


def class_slot(scheme: str, side: int) -> Optional[Tuple[int, int]]:
    """Grid position read out for classification, None for mean pooling."""
    if scheme == MEAN_POOL:
        return None
    if side < 2:
        raise ContractError(f"{scheme} scheme needs a grid side >= 2, got {side}")
    if scheme == EDGE_CROSS:
        return 0, 0
    if scheme == CENTER_CROSS:
        c = side // 2
        return c, c
    raise ContractError(f"unknown class token scheme '{scheme}'")


def _insert_line(grid: Node, cls_vec: Node, index: int, axis: int) -> Node:
    shape = list(grid.shape)
    shape[axis] = 1
    line = ag.broadcast_to(cls_vec, shape)
    before = [slice(None)] * 4
    after = [slice(None)] * 4
    before[axis] = slice(0, index)
    after[axis] = slice(index, None)
    parts = []
    if index > 0:
        parts.append(ag.take(grid, tuple(before)))
    parts.append(line)
    if index < grid.shape[axis]:
        parts.append(ag.take(grid, tuple(after)))
    return ag.concat(parts, axis=axis)


def insert_class_tokens(grid, scheme: str, cls_vec=None) -> Node:
    """
    Add a row and a column of class tokens.

    'mean' returns the grid unchanged; 'edge' inserts them at index 0;
    'center' at index ceil(M/2).

    Args:
        grid: (B, M, M, D)
        scheme: 'mean', 'edge' or 'center'
        cls_vec: (D,) class token, required for the cross schemes

    Returns:
        (B, M', M', D)
    """
    grid = ag.constant(grid)
    if scheme == MEAN_POOL:
        return grid
    if scheme not in CLS_SCHEMES:
        raise ContractError(f"unknown class token scheme '{scheme}'")
    if cls_vec is None:
        raise ContractError(f"{scheme} scheme needs a class token")
    M = grid.shape[1]
    index = 0 if scheme == EDGE_CROSS else (M + 1) // 2
    cls_vec = ag.constant(cls_vec)
    with_col = _insert_line(grid, cls_vec, index, axis=2)
    return _insert_line(with_col, cls_vec, index, axis=1)


def extract_class_feature(grid, scheme: str) -> Node:
    """
    Classification feature: mean over positions, or the class slot.

    Args:
        grid: (B, M', M', D)
        scheme: scheme used at insertion

    Returns:
        (B, D)
    """
    grid = ag.constant(grid)
    if grid.value.ndim != 4 or grid.shape[1] != grid.shape[2]:
        raise DimensionError(f"expected a square (B, M, M, D) grid, got {grid.shape}")
    if scheme == MEAN_POOL:
        return ag.mean(grid, axis=(1, 2))
    i, j = class_slot(scheme, grid.shape[1])
    return ag.take(grid, (slice(None), i, j))


def _mlp(x: Node, block: V2MBlockParams) -> Node:
    return ag.linear(ag.gelu(ag.linear(x, block.fc1_w, block.fc1_b)), block.fc2_w, block.fc2_b)


def _flatten_mix(x: Node, params: SelectiveParams, options: ScanOptions) -> Node:
    """Single selective scan over the raster-ordered tokens."""
    Bn, H, W, D = x.shape
    y = selective_scan(ag.reshape(x, (Bn, H * W, D)), params, 'projected', options)
    return ag.reshape(y, (Bn, H, W, D))


def v2m_block_forward(z, block: V2MBlockParams, config: ModelConfig) -> Node:
    """
    u = z + aggregate(gate * ssm2d(expand(LN(z))), w_out); out = u + MLP(LN(u)).

    Args:
        z: (B, M', M', D)
        block: block parameters
        config: model configuration

    Returns:
        (B, M', M', D)
    """
    z = ag.constant(z)
    normed = ag.layer_norm(z, block.norm1_gamma, block.norm1_beta, LN_EPS)
    gate = ag.silu(ag.linear(normed, block.gate_w, block.gate_b))
    expanded = expand_directions(normed, config.directions)
    gates = expand_directions(gate, config.directions)
    options = config.scan_options
    if config.mixer == 'flatten':
        mixed = _flatten_mix(expanded.z, block.flat, options)
    else:
        mixed = ssm2d_forward(expanded.z, block.p_h, block.p_v, config.pipelines, options)
    u = ag.add(z, aggregate_directions(expanded.with_values(ag.mul(mixed, gates.z)), block.w_out))
    return ag.add(u, _mlp(ag.layer_norm(u, block.norm2_gamma, block.norm2_beta, LN_EPS), block))


def model_forward(image: Tensor, config: ModelConfig, params: ModelParams) -> Node:
    """
    Logits for a batch of images.

    Args:
        image: (B, h, w, c)
        config: model configuration
        params: model parameters

    Returns:
        (B, num_classes) logits
    """
    grid = patch_embed(image, params['patch_embed.weight'], params['patch_embed.bias'],
                       params['pos_embed'], config.patch_size)
    z = insert_class_tokens(grid, config.cls_scheme, params.get('cls_token'))
    for block in params.blocks:
        z = v2m_block_forward(z, block, config)
    z = ag.layer_norm(z, params['norm.gamma'], params['norm.beta'], LN_EPS)
    feature = extract_class_feature(z, config.cls_scheme)
    return ag.linear(feature, params['head.weight'], params['head.bias'])


def predict(params: ModelParams, config: ModelConfig, images: Tensor, batch_size: int = 256) -> Tensor:
    """Logits for many images, evaluated in fixed-order batches."""
    outputs = []
    for start in range(0, images.shape[0], batch_size):
        outputs.append(model_forward(images[start:start + batch_size], config, params).value)
    if not outputs:
        return np.zeros((0, config.num_classes), dtype=config.dtype)
    return np.concatenate(outputs, axis=0)
