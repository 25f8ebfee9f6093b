"""
Scan benchmark.

Times scan_sequential against scan_parallel for every (length, workers)
cell. Before a cell is timed the two implementations' outputs are
compared; a cell whose outputs disagree is reported and not timed.
"""

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from typing import List, Sequence, TextIO

import numpy as np

from numerics import Rng, as_dtype
from scan1d import DiscreteScanInputs, scan_parallel, scan_sequential


logger = logging.getLogger(__name__)

BENCH_HEADER = ['L', 'workers', 'impl', 'mean_ms', 'stddev_ms']
GATE_TOLERANCE = {'f32': 1e-4, 'f64': 1e-9}
IMPLEMENTATIONS = (('sequential', scan_sequential), ('parallel', scan_parallel))


@dataclass
class BenchRow:
    L: int
    workers: int
    impl: str
    mean_ms: float
    stddev_ms: float

    def row(self) -> List[str]:
        return [str(self.L), str(self.workers), self.impl, f"{self.mean_ms:.3f}", f"{self.stddev_ms:.3f}"]


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def resolve_workers(spec) -> int:
    """'max' means one worker per CPU."""
    if str(spec) == 'max':
        return os.cpu_count() or 1
    return int(spec)


def _lane_shape(lanes: int, L: int):
    d = int(np.sqrt(lanes)) or 1
    return 1, L, d, max(1, lanes // d)


def run_benchmark(lengths: Sequence[int], workers: Sequence, repeats: int = 5, lanes: int = 256,
                  precision: str = 'f32', seed: int = 0) -> BenchReport:
    """
    Benchmark both scan implementations.

    Args:
        lengths: sequence lengths L
        workers: worker counts, integers or 'max'
        repeats: timed runs per cell
        lanes: independent recurrences per input (split as D x N)
        precision: 'f32' or 'f64'
        seed: input seed

    Returns:
        BenchReport with len(lengths) * len(workers) * 2 rows when every gate passes
    """
    dtype = as_dtype(precision)
    tolerance = GATE_TOLERANCE[precision]
    rng = Rng(seed).spawn('bench')
    report = BenchReport()
    for L in lengths:
        shape = _lane_shape(lanes, L)
        inputs = DiscreteScanInputs(rng.uniform(shape, 0.5, 1.0).astype(dtype),
                                    rng.normal(shape).astype(dtype))
        for spec in workers:
            n = resolve_workers(spec)
            reference = scan_sequential(inputs, workers=n).astype(np.float64)
            found = scan_parallel(inputs, workers=n).astype(np.float64)
            scale = max(float(np.max(np.abs(reference))), np.finfo(np.float64).tiny)
            deviation = float(np.max(np.abs(found - reference))) / scale
            if deviation > tolerance:
                message = f"L={L} workers={n}: outputs differ by {deviation:.3e} (tolerance {tolerance:.0e})"
                logger.error(message)
                report.failures.append(message)
                continue
            for impl, fn in IMPLEMENTATIONS:
                times = []
                for _ in range(repeats):
                    start = time.perf_counter()
                    fn(inputs, workers=n)
                    times.append((time.perf_counter() - start) * 1000.0)
                std = float(np.std(times, ddof=1)) if len(times) > 1 else 0.0
                report.rows.append(BenchRow(L, n, impl, float(np.mean(times)), std))
                logger.info(f"bench L={L} workers={n} {impl}: {np.mean(times):.2f} ms")
    return report


def write_bench_csv(stream: TextIO, rows: Sequence[BenchRow]):
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(BENCH_HEADER)
    for row in rows:
        writer.writerow(row.row())
