"""
Unit tests for the property suites behind the `check` command.

Runs every suite with reduced case counts and confirms the scan suite
catches an injected sign fault.
"""

import os
import unittest
from unittest.mock import patch

import numpy as np

from autograd import Parameter, finite_diff_check
from checks import (GRAD_TOLERANCE, SUITE_NAMES, decoupled_oracle, equivariance_suite, gradient_cases,
                    grad_suite, model_gradient_case, roesser_hand_case, roesser_suite, roundtrip_suite,
                    run_suites, scan_suite)
from config import RunConfig
from model import ModelConfig
from numerics import Rng
from ssm2d import random_roesser_params, roesser_scan_exact


SMALL = RunConfig({'seed': 3, 'scan_configs': 12, 'max_len': 40, 'roesser_draws': 6,
                   'equivariance_draws': 2})


class TestSuites(unittest.TestCase):
    """Test cases for the individual suites."""

    def test_scan_suite(self):
        """Test the scan suite passes and counts its cases."""
        result = scan_suite(SMALL, Rng(1))
        self.assertTrue(result.passed, result.detail)
        self.assertEqual(result.cases, 12)

    def test_scan_suite_catches_fault(self):
        """Test a negated parallel scan fails the scan suite."""
        with patch.dict(os.environ, {'V2M_FAULT_INJECT': 'scan_sign'}):
            result = scan_suite(SMALL, Rng(1))
        self.assertFalse(result.passed)
        self.assertIn('failing', result.detail)

    def test_roesser_hand_case(self):
        """Test the 2x2 all-ones grid with zero transitions."""
        np.testing.assert_array_equal(roesser_hand_case(), [[0.0, 1.0], [1.0, 2.0]])

    def test_decoupled_oracle(self):
        """Test zero cross terms reduce the 2D recurrence to row plus column scans."""
        rng = Rng(4)
        params = random_roesser_params(rng, 3, decoupled=True)
        x = rng.normal((5, 4))
        np.testing.assert_allclose(roesser_scan_exact(x, params), decoupled_oracle(x, params),
                                   rtol=0, atol=1e-12)

    def test_roesser_suite(self):
        """Test the Roesser suite passes."""
        result = roesser_suite(SMALL, Rng(2))
        self.assertTrue(result.passed, result.detail)
        self.assertEqual(result.cases, 7)

    def test_gradient_cases(self):
        """Test every differentiable operation agrees with central differences."""
        for name, (f, params) in gradient_cases(Rng(5)).items():
            report = finite_diff_check(f, params, 1e-4)
            self.assertLessEqual(report.max_error, GRAD_TOLERANCE, f"{name}: {report.worst_parameter}")

    def test_grad_suite_without_model(self):
        """Test the grad suite passes on the operation cases."""
        result = grad_suite(SMALL, Rng(6), include_model=False)
        self.assertTrue(result.passed, result.detail)

    def test_model_gradient_case(self):
        """Test the end-to-end classifier case on a 3x3 padded grid within tolerance."""
        config = ModelConfig(image_size=4, patch_size=2, channels=1, dim=4, state_size=2, depth=1,
                             mlp_ratio=2, num_classes=4, cls_scheme='center', precision='f64')
        f, start = model_gradient_case(config, Rng(8))
        dt = np.log1p(np.exp(start['blocks.0.v.second.dt_bias']))
        self.assertTrue(np.all((dt > 0.3 - 1e-12) & (dt < 1.0 + 1e-12)))
        report = finite_diff_check(f, start, 1e-4)
        self.assertLessEqual(report.max_error, GRAD_TOLERANCE, report.worst_parameter)

    def test_model_gradient_case_uses_given_leaves(self):
        """Test the loss reads only the leaves it is given."""
        config = ModelConfig(image_size=4, patch_size=2, channels=1, dim=4, state_size=2, depth=1,
                             mlp_ratio=2, num_classes=4, cls_scheme='center', precision='f64')
        f, start = model_gradient_case(config, Rng(9))

        def leaves(values):
            return {name: Parameter(value.copy(), name) for name, value in values.items()}

        before = float(f(leaves(start)).value)
        moved = dict(start, **{'head.bias': start['head.bias'] + 1.0,
                               'blocks.0.h.first.w_C': start['blocks.0.h.first.w_C'] * 2.0})
        self.assertNotEqual(float(f(leaves(moved)).value), before)
        self.assertEqual(float(f(leaves(start)).value), before)

    def test_equivariance_suite(self):
        """Test the four-direction operator commutes with a quarter turn."""
        result = equivariance_suite(SMALL, Rng(7))
        self.assertTrue(result.passed, result.detail)

    def test_roundtrip_suite(self):
        """Test checkpoint, IDX and config persistence."""
        result = roundtrip_suite(SMALL, Rng(8))
        self.assertTrue(result.passed, result.detail)


class TestRunSuites(unittest.TestCase):
    """Test cases for run_suites."""

    def test_selected_suites_in_order(self):
        """Test a subset runs in canonical order with timings."""
        results = run_suites(SMALL, ['roundtrip', 'roesser'])
        self.assertEqual([r.name for r in results], ['roesser', 'roundtrip'])
        self.assertTrue(all(r.passed and r.seconds >= 0.0 for r in results))
        self.assertTrue(results[0].summary().startswith('PASS roesser'))

    def test_configured_suites(self):
        """Test the suites setting is used when no names are given."""
        settings = RunConfig(dict(SMALL.settings, suites=['scan']))
        self.assertEqual([r.name for r in run_suites(settings)], ['scan'])

    def test_seeded(self):
        """Test one seed reproduces the same maximum error."""
        a = run_suites(SMALL, ['scan'])[0]
        b = run_suites(SMALL, ['scan'])[0]
        self.assertEqual(a.max_error, b.max_error)

    def test_suite_names(self):
        """Test every suite name is registered."""
        self.assertEqual(SUITE_NAMES, ('scan', 'roesser', 'grad', 'equivariance', 'roundtrip'))


if __name__ == '__main__':
    unittest.main()
