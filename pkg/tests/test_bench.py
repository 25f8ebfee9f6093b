"""
Unit tests for the scan benchmark.
"""

import csv
import io
import os
import unittest
from unittest.mock import patch

from bench import BENCH_HEADER, resolve_workers, run_benchmark, write_bench_csv


class TestBenchmark(unittest.TestCase):
    """Test cases for run_benchmark."""

    def test_rows_per_cell(self):
        """Test one row per (length, workers, implementation)."""
        report = run_benchmark([8, 33], ['1', 2], repeats=2, lanes=6, precision='f64')
        self.assertTrue(report.passed)
        self.assertEqual(len(report.rows), 2 * 2 * 2)
        self.assertEqual({(r.L, r.workers) for r in report.rows}, {(8, 1), (8, 2), (33, 1), (33, 2)})
        self.assertTrue(all(r.mean_ms >= 0.0 and r.stddev_ms >= 0.0 for r in report.rows))

    def test_single_repeat_has_zero_stddev(self):
        """Test one timed run reports a zero standard deviation."""
        report = run_benchmark([4], [1], repeats=1, lanes=1)
        self.assertEqual([r.stddev_ms for r in report.rows], [0.0, 0.0])

    def test_gate_rejects_disagreement(self):
        """Test a faulty parallel scan is reported and not timed."""
        with patch.dict(os.environ, {'V2M_FAULT_INJECT': 'scan_sign'}):
            report = run_benchmark([16], [1], repeats=1, lanes=4)
        self.assertFalse(report.passed)
        self.assertEqual(report.rows, [])
        self.assertIn('L=16', report.failures[0])

    def test_resolve_workers(self):
        """Test integer and 'max' worker specs."""
        self.assertEqual(resolve_workers('3'), 3)
        self.assertEqual(resolve_workers(2), 2)
        with patch('bench.os.cpu_count', return_value=6):
            self.assertEqual(resolve_workers('max'), 6)

    def test_csv(self):
        """Test the CSV header and row formatting."""
        report = run_benchmark([4], [1], repeats=2, lanes=2)
        stream = io.StringIO()
        write_bench_csv(stream, report.rows)
        rows = list(csv.reader(io.StringIO(stream.getvalue())))
        self.assertEqual(rows[0], BENCH_HEADER)
        self.assertEqual([(r[0], r[1], r[2]) for r in rows[1:]], [('4', '1', 'sequential'),
                                                                 ('4', '1', 'parallel')])


if __name__ == '__main__':
    unittest.main()
