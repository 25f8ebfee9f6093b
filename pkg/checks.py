"""
Property suites run by the `check` command.

Each suite draws its random cases from a stream derived from the run
seed, compares an implementation against an independent oracle and
returns a SuiteResult. Suites never raise on a failed comparison; they
report it.

    scan          scan_parallel vs scan_sequential over random configurations
    roesser       exact 2D recurrence vs two decoupled 1D recurrences
    grad          backward() vs central differences, per operation and end to end
    equivariance  quarter-turn equivariance of the four-direction operator
    roundtrip     checkpoint, IDX and config-echo persistence
"""

import logging
import os
import tempfile
import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import autograd as ag
from autograd import finite_diff_check
from checkpoint import decode_checkpoint, encode_checkpoint, Checkpoint
from config import RunConfig
from data import load_idx, write_idx
from directions import ALL_DIRECTIONS, aggregate_directions, expand_directions, rot90
from model import ModelConfig, init_model, model_forward
from numerics import Rng, V2MError
from scan1d import (DiscreteScanInputs, ScanOptions, SelectiveParams, init_selective_params,
                    scan, scan_parallel, scan_sequential, selective_scan, zoh_discretize)
from ssm2d import (COLS_THEN_ROWS, ROWS_THEN_COLS, Pipeline2DParams, Roesser2DParams,
                   init_pipeline_params, random_roesser_params, roesser_scan_1d, roesser_scan_exact,
                   ssm2d_forward)
from train import cross_entropy_loss


logger = logging.getLogger(__name__)

SUITE_NAMES = ('scan', 'roesser', 'grad', 'equivariance', 'roundtrip')

SCAN_TOLERANCE = {np.float64: 1e-9, np.float32: 1e-4}
ROESSER_TOLERANCE = 1e-12
GRAD_TOLERANCE = 1e-4
EQUIVARIANCE_TOLERANCE = 1e-5


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float = 0.0
    tolerance: float = 0.0
    cases: int = 0
    detail: str = ''
    seconds: float = 0.0

    def summary(self) -> str:
        status = 'PASS' if self.passed else 'FAIL'
        line = (f"{status} {self.name}: {self.cases} cases, max error {self.max_error:.3e} "
                f"(tolerance {self.tolerance:.0e}), {self.seconds:.1f}s")
        return f"{line} - {self.detail}" if self.detail else line


def _relative_deviation(found: np.ndarray, reference: np.ndarray) -> float:
    scale = float(np.max(np.abs(reference))) if reference.size else 0.0
    diff = float(np.max(np.abs(found.astype(np.float64) - reference.astype(np.float64)))) if reference.size else 0.0
    return diff / scale if scale > 0 else diff


# ---------------------------------------------------------------- scan

def scan_suite(settings: RunConfig, rng: Rng) -> SuiteResult:
    """Random (G, L, D, N) configurations, alternating f64 and f32."""
    worst = {np.float64: 0.0, np.float32: 0.0}
    failures = []
    count = settings['scan_configs']
    max_len = settings['max_len']
    for case in range(count):
        dtype = np.float64 if case % 2 == 0 else np.float32
        G = int(rng.integers(1, 3))
        L = int(rng.integers(1, max_len + 1))
        D = int(rng.integers(1, 17))
        N = int(rng.integers(1, 17))
        shape = (G, L, D, N)
        inputs = DiscreteScanInputs(rng.uniform(shape, 0.0, 1.0).astype(dtype),
                                    rng.normal(shape).astype(dtype))
        h0 = rng.normal((G, D, N)).astype(dtype) if rng.uniform((1,))[0] < 0.5 else None
        workers = int(rng.integers(1, 5))
        reference = scan_sequential(inputs, h0)
        found = scan_parallel(inputs, h0, workers=workers)
        dev = _relative_deviation(found, reference)
        worst[dtype] = max(worst[dtype], dev)
        if not dev <= SCAN_TOLERANCE[dtype]:
            failures.append(f"case {case} {shape} {np.dtype(dtype).name} workers={workers}: {dev:.3e}")
    passed = not failures
    detail = '' if passed else f"{len(failures)} failing, first: {failures[0]}"
    return SuiteResult('scan', passed, max(worst[np.float64], worst[np.float32]),
                       SCAN_TOLERANCE[np.float32], count,
                       f"f64 max {worst[np.float64]:.2e}, f32 max {worst[np.float32]:.2e}"
                       if passed else detail)


# ---------------------------------------------------------------- roesser

def roesser_hand_case() -> np.ndarray:
    """All A = 0, unit B and C, N = 1 on a 2x2 grid of ones."""
    zero, one = np.zeros((1, 1)), np.ones((1, 1))
    params = Roesser2DParams(A1=zero, A2=zero, A3=zero, A4=zero, B1=one, B2=one, C1=one, C2=one)
    return roesser_scan_exact(np.ones((2, 2)), params)


def decoupled_oracle(x: np.ndarray, params) -> np.ndarray:
    """Row recurrences with (A1, B1, C1) plus column recurrences with (A4, B2, C2)."""
    rows = np.stack([roesser_scan_1d(x[i], params.A1, params.B1, params.C1) for i in range(x.shape[0])])
    cols = np.stack([roesser_scan_1d(x[:, j], params.A4, params.B2, params.C2)
                     for j in range(x.shape[1])], axis=1)
    return rows + cols


def roesser_suite(settings: RunConfig, rng: Rng) -> SuiteResult:
    hand = roesser_hand_case()
    expected = np.array([[0.0, 1.0], [1.0, 2.0]])
    if not np.array_equal(hand, expected):
        return SuiteResult('roesser', False, float(np.max(np.abs(hand - expected))), 0.0, 1,
                           f"2x2 hand case gave {hand.tolist()}")
    worst = 0.0
    draws = settings['roesser_draws']
    for _ in range(draws):
        H, W = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        N = int(rng.integers(1, 5))
        params = random_roesser_params(rng, N, decoupled=True)
        x = rng.normal((H, W))
        exact = roesser_scan_exact(x, params)
        worst = max(worst, float(np.max(np.abs(exact - decoupled_oracle(x, params)))))
    return SuiteResult('roesser', worst <= ROESSER_TOLERANCE, worst, ROESSER_TOLERANCE, draws + 1)


# ---------------------------------------------------------------- gradients

def _weighted(node, weights: np.ndarray):
    return ag.sum(ag.mul(node, weights))


def _selective_from(leaves: Dict[str, ag.Parameter], prefix: str) -> SelectiveParams:
    return SelectiveParams(a_log=leaves[f"{prefix}.a_log"], w_B=leaves.get(f"{prefix}.w_B"),
                           w_C=leaves[f"{prefix}.w_C"], w_dt_down=leaves[f"{prefix}.w_dt_down"],
                           w_dt_up=leaves[f"{prefix}.w_dt_up"], dt_bias=leaves[f"{prefix}.dt_bias"])


def _values(params: Sequence[ag.Node]) -> Dict[str, np.ndarray]:
    return {p.name: p.value.astype(np.float64) for p in params}


def gradient_cases(rng: Rng, tiny_model: Optional[ModelConfig] = None) -> Dict[str, tuple]:
    """
    name -> (f, params) pairs for finite_diff_check.

    Covers every differentiable operation plus the end-to-end classifier
    when tiny_model is given.
    """
    def draw(*shape, low=None, high=None):
        if low is not None:
            return rng.uniform(shape, low, high)
        return rng.normal(shape)

    cases: Dict[str, tuple] = {}

    w_linear = draw(3, 5)
    cases['linear'] = (lambda p: _weighted(ag.linear(p['x'], p['w'], p['b']), w_linear),
                       {'x': draw(3, 4), 'w': draw(4, 5), 'b': draw(5)})
    w_norm = draw(3, 5)
    cases['layer_norm'] = (lambda p: _weighted(ag.layer_norm(p['x'], p['g'], p['b']), w_norm),
                           {'x': draw(3, 5), 'g': draw(5), 'b': draw(5)})
    for name, op in (('exp', ag.exp), ('softplus', ag.softplus), ('sigmoid', ag.sigmoid),
                     ('silu', ag.silu), ('gelu', ag.gelu)):
        weights = draw(4, 3)
        cases[name] = ((lambda op_, w_: lambda p: _weighted(op_(p['x']), w_))(op, weights),
                       {'x': draw(4, 3)})
    w_einsum = draw(2, 3, 4)
    cases['einsum'] = (lambda p: _weighted(ag.einsum('gln,gldn->gld', p['c'], p['h']), w_einsum),
                       {'c': draw(2, 3, 5), 'h': draw(2, 3, 4, 5)})
    w_shapes = draw(2, 9, 2)

    def shapes(p):
        x = p['x']
        stacked = ag.concat([ag.rot90(x, 1), ag.transpose(x, (0, 2, 1, 3)), x], axis=0)
        moved = ag.reshape(ag.take(stacked, slice(1, 3)), (2, 9, 2))
        scale = ag.broadcast_to(p['v'], (2, 9, 2))
        return ag.add(_weighted(ag.mul(moved, scale), w_shapes), ag.mean(ag.sub(x, ag.neg(x))))

    cases['shape_ops'] = (shapes, {'x': draw(1, 3, 3, 2), 'v': draw(2)})

    wa, wb = draw(2, 3, 2, 3), draw(2, 3, 2, 3)
    cases['zoh_discretize'] = (
        lambda p: ag.add(_weighted(zoh_discretize(p['delta'], p['A'], p['B'])[0], wa),
                         _weighted(zoh_discretize(p['delta'], p['A'], p['B'])[1], wb)),
        {'delta': draw(2, 3, 2, low=0.1, high=1.0), 'A': -draw(2, 3, low=0.5, high=2.0),
         'B': draw(2, 3, 3)})
    for impl in ('sequential', 'parallel'):
        weights = draw(2, 5, 2, 3)
        cases[f"scan_{impl}"] = (
            (lambda impl_, w_: lambda p: _weighted(
                scan(p['a'], p['bx'], p['h0'], ScanOptions(impl_, 2)), w_))(impl, weights),
            {'a': draw(2, 5, 2, 3, low=0.2, high=0.95), 'bx': draw(2, 5, 2, 3), 'h0': draw(2, 2, 3)})

    init_rng = rng.spawn('grad.init')
    for b_mode, impl, recompute in (('projected', 'sequential', False),
                                    ('projected', 'parallel', True),
                                    ('unit', 'sequential', True)):
        sp = init_selective_params(init_rng, 4, 4, 's', b_mode == 'projected', np.float64, init_scale=2.0)
        x, weights = draw(2, 6, 4), draw(2, 6, 4)
        options = ScanOptions(impl, 1, recompute)
        params = _values(sp.parameters())
        params['x'] = x
        cases[f"selective_scan_{b_mode}_{impl}"] = (
            (lambda m, o, w_: lambda p: _weighted(
                selective_scan(p['x'], _selective_from(p, 's'), m, o), w_))(b_mode, options, weights),
            params)

    p_h = init_pipeline_params(init_rng, 2, 2, 'h', ROWS_THEN_COLS, np.float64, init_scale=2.0)
    p_v = init_pipeline_params(init_rng, 2, 2, 'v', COLS_THEN_ROWS, np.float64, init_scale=2.0)
    params = _values(p_h.parameters() + p_v.parameters())
    params['x'] = draw(1, 3, 3, 2)
    params['w_out'] = draw(2, 2)
    weights = draw(1, 3, 3, 2)

    def directional(p):
        def pipeline(prefix, order):
            return Pipeline2DParams(_selective_from(p, f"{prefix}.first"),
                                    _selective_from(p, f"{prefix}.second"), order)
        expanded = expand_directions(p['x'], ALL_DIRECTIONS)
        mixed = ssm2d_forward(expanded.z, pipeline('h', ROWS_THEN_COLS), pipeline('v', COLS_THEN_ROWS))
        return _weighted(aggregate_directions(expanded.with_values(mixed), p['w_out']), weights)

    cases['ssm2d_directions'] = (directional, params)

    labels = np.array([0, 2, 1])
    cases['cross_entropy'] = (lambda p: cross_entropy_loss(p['logits'], labels), {'logits': draw(3, 4)})

    if tiny_model is not None:
        cases['model'] = model_gradient_case(tiny_model, rng.spawn('grad.model'))
    return cases


def model_gradient_case(config: ModelConfig, rng: Rng, batch: int = 2,
                        dt_range: tuple = (0.3, 1.0)) -> tuple:
    """
    Cross-entropy of the full classifier, every parameter checked.

    Timescales are redrawn uniformly from dt_range.
    """
    params = init_model(config, seed=int(rng.integers(0, 2 ** 31)), zero_out=False)
    start = {name: value.astype(np.float64) for name, value in params.values().items()}
    for name in start:
        if name.endswith('.dt_bias'):
            dt = rng.uniform(start[name].shape, *dt_range)
            start[name] = dt + np.log(-np.expm1(-dt))
    images = rng.uniform((batch, config.image_size, config.image_size, config.channels))
    labels = np.arange(batch) % config.num_classes

    def loss(leaves):
        return cross_entropy_loss(model_forward(images, config, params.rebind(leaves)), labels)

    return loss, start


def tiny_model_config(settings: RunConfig) -> ModelConfig:
    """4x4 patch grid plus a centered class token cross, D=8, N=4, K=2, in f64."""
    return ModelConfig(image_size=8, patch_size=2, channels=1, dim=8, state_size=4, depth=2,
                       mlp_ratio=2, num_classes=4, cls_scheme='center', precision='f64',
                       workers=settings['workers'])


def grad_suite(settings: RunConfig, rng: Rng, include_model: bool = True) -> SuiteResult:
    cases = gradient_cases(rng, tiny_model_config(settings) if include_model else None)
    worst, worst_case = 0.0, ''
    for name, (f, params) in cases.items():
        report = finite_diff_check(f, params, settings['grad_step'])
        logger.debug(f"grad {name}: {report.max_error:.3e} ({report.worst_parameter})")
        if report.max_error >= worst:
            worst, worst_case = report.max_error, f"{name}/{report.worst_parameter}"
    return SuiteResult('grad', worst <= GRAD_TOLERANCE, worst, GRAD_TOLERANCE, len(cases),
                       f"worst {worst_case}")


# ---------------------------------------------------------------- equivariance

def equivariance_suite(settings: RunConfig, rng: Rng, side: int = 8, dim: int = 4) -> SuiteResult:
    """
    F(x) = aggregate(ssm2d(expand(x))) with shared parameters, f32.

    Also checks that identity processing with w_out = I aggregates to 4x exactly.
    """
    init_rng = rng.spawn('equivariance.init')
    p_h = init_pipeline_params(init_rng, dim, 4, 'h', ROWS_THEN_COLS, np.float32)
    p_v = init_pipeline_params(init_rng, dim, 4, 'v', COLS_THEN_ROWS, np.float32)
    w_out = rng.normal((dim, dim), 0.0, 1.0 / np.sqrt(dim)).astype(np.float32)
    options = ScanOptions(workers=settings['workers'])

    def F(x):
        expanded = expand_directions(x)
        mixed = ssm2d_forward(expanded.z, p_h, p_v, options=options)
        return aggregate_directions(expanded.with_values(mixed), w_out).value

    worst = 0.0
    identity = np.eye(dim, dtype=np.float32)
    exact = True
    draws = settings['equivariance_draws']
    for _ in range(draws):
        x = rng.normal((1, side, side, dim)).astype(np.float32)
        worst = max(worst, float(np.max(np.abs(F(rot90(x, 1)) - rot90(F(x), 1)))))
        exact = exact and np.array_equal(aggregate_directions(expand_directions(x), identity).value, 4 * x)
    passed = worst <= EQUIVARIANCE_TOLERANCE and exact
    return SuiteResult('equivariance', passed, worst, EQUIVARIANCE_TOLERANCE, draws,
                       '' if exact else 'identity aggregation differs from 4x')


# ---------------------------------------------------------------- persistence

def roundtrip_suite(settings: RunConfig, rng: Rng) -> SuiteResult:
    failures = []
    config = tiny_model_config(settings)
    for precision in ('f32', 'f64'):
        params = init_model(replace(config, precision=precision),
                            seed=int(rng.integers(0, 2 ** 31)))
        first = encode_checkpoint(Checkpoint(params.values(), settings.echo()))
        loaded = decode_checkpoint(first)
        second = encode_checkpoint(loaded)
        if first != second:
            failures.append(f"checkpoint {precision} re-encoding differs")
        for name, value in params.values().items():
            if not np.array_equal(loaded.tensors[name], value) or loaded.tensors[name].dtype != value.dtype:
                failures.append(f"checkpoint {precision} tensor {name} differs")
                break

    pixels = rng.integers(0, 256, (3, 4, 5)).astype(np.uint8)
    labels = rng.integers(0, 10, 3).astype(np.uint8)
    with tempfile.TemporaryDirectory() as tmp:
        images_path, labels_path = os.path.join(tmp, 'images.idx'), os.path.join(tmp, 'labels.idx')
        write_idx(images_path, labels_path, pixels, labels)
        samples = load_idx(images_path, labels_path)
        if not np.array_equal(np.rint(samples.images[..., 0] * 255).astype(np.uint8), pixels):
            failures.append('IDX pixels differ')
        if not np.array_equal(samples.labels, labels):
            failures.append('IDX labels differ')

        config_path = os.path.join(tmp, 'config.json')
        settings.save(config_path)
        if RunConfig.load(config_path, environ={}).echo() != settings.echo():
            failures.append('config echo differs after reload')
    return SuiteResult('roundtrip', not failures, float(len(failures)), 0.0, 4, '; '.join(failures))


SUITES: Dict[str, Callable[[RunConfig, Rng], SuiteResult]] = {
    'scan': scan_suite,
    'roesser': roesser_suite,
    'grad': grad_suite,
    'equivariance': equivariance_suite,
    'roundtrip': roundtrip_suite,
}


def run_suites(settings: RunConfig, names: Optional[Sequence[str]] = None) -> List[SuiteResult]:
    """
    Run the named suites (all by default) in canonical order.

    Args:
        settings: resolved configuration; supplies seed and case counts
        names: subset of SUITE_NAMES

    Returns:
        One SuiteResult per suite
    """
    wanted = set(names or settings['suites'])
    root = Rng(settings['seed']).spawn('check')
    results = []
    for name in SUITE_NAMES:
        if name not in wanted:
            continue
        start = time.perf_counter()
        try:
            result = SUITES[name](settings, root.spawn(name))
        except V2MError as e:
            logger.error(f"Suite {name} raised: {e}")
            result = SuiteResult(name, False, float('inf'), 0.0, 0, f"raised {type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - start
        logger.info(result.summary())
        results.append(result)
    return results
