#!/usr/bin/env python3
"""
Test runner for the V2M engine.

Discovers the unittest modules under tests/, runs them and prints a
summary with per-module counts. Exits 1 if any test fails.
"""

import os
import sys
import unittest
from collections import Counter


TESTS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'tests')


def run_tests(verbosity=2, pattern='test_*.py', failfast=False):
    """
    Run all test suites and return results.

    Args:
        verbosity: Test output verbosity level (0-2)
        pattern: file pattern for discovery
        failfast: stop on the first failure

    Returns:
        (TestResult, Counter of tests per module)
    """
    loader = unittest.TestLoader()
    suite = loader.discover(TESTS_DIR, pattern=pattern, top_level_dir=os.path.dirname(TESTS_DIR))
    per_module = Counter(test.id().split('.')[-3] for test in _flatten(suite))

    runner = unittest.TextTestRunner(verbosity=verbosity, stream=sys.stdout, failfast=failfast)
    return runner.run(suite), per_module


def _flatten(suite):
    for item in suite:
        if isinstance(item, unittest.TestSuite):
            yield from _flatten(item)
        else:
            yield item


def print_summary(result, per_module):
    """
    Print a test summary.

    Args:
        result: TestResult object from unittest
        per_module: tests discovered per module
    """
    print("\n" + "=" * 70)
    print("TEST SUMMARY")
    print("=" * 70)

    total_tests = result.testsRun
    failures = len(result.failures)
    errors = len(result.errors)
    skipped = len(result.skipped)
    successful = total_tests - failures - errors - skipped

    if per_module:
        print()
        for module, count in sorted(per_module.items()):
            print(f"  {module:<24} {count:4d} tests")

    print(f"\nTotal Tests Run:  {total_tests}")
    if total_tests:
        print(f"Successful:       {successful} ({successful / total_tests * 100:.1f}%)")
    print(f"Failures:         {failures}")
    print(f"Errors:           {errors}")
    print(f"Skipped:          {skipped}")

    for title, entries in (("FAILURES", result.failures), ("ERRORS", result.errors)):
        if entries:
            print("\n" + "-" * 70)
            print(f"{title}:")
            print("-" * 70)
            for test, traceback in entries:
                print(f"\n{test}:")
                print(traceback)

    print("\n" + "=" * 70)
    print("ALL TESTS PASSED" if result.wasSuccessful() else "SOME TESTS FAILED")
    print("=" * 70 + "\n")


def run_specific_test(test_module, verbosity=2, failfast=False):
    """
    Run a specific test module.

    Args:
        test_module: Name of test module (e.g., 'test_scan1d')
        verbosity: Test output verbosity level (0-2)
        failfast: stop on the first failure
    """
    loader = unittest.TestLoader()
    if not test_module.startswith('tests.'):
        test_module = f'tests.{test_module}'
    suite = loader.loadTestsFromName(test_module)
    runner = unittest.TextTestRunner(verbosity=verbosity, failfast=failfast)
    return runner.run(suite), Counter({test_module.split('.')[-1]: suite.countTestCases()})


def main():
    """Main entry point for test runner."""
    import argparse

    parser = argparse.ArgumentParser(description='Run tests for the V2M engine')
    parser.add_argument('-v', '--verbosity', type=int, choices=[0, 1, 2], default=2,
                        help='Test output verbosity (0=quiet, 1=normal, 2=verbose)')
    parser.add_argument('-m', '--module', type=str,
                        help='Run specific test module (e.g., test_scan1d)')
    parser.add_argument('-p', '--pattern', default='test_*.py',
                        help='Discovery pattern (e.g., test_s*.py)')
    parser.add_argument('-x', '--failfast', action='store_true',
                        help='Stop on the first failure')
    parser.add_argument('-q', '--quiet', action='store_true',
                        help='Minimal output (equivalent to -v 0)')
    parser.add_argument('--no-summary', action='store_true',
                        help='Skip summary output')

    args = parser.parse_args()
    verbosity = 0 if args.quiet else args.verbosity

    # Tests must not inherit a fault hook from the shell
    os.environ.pop('V2M_FAULT_INJECT', None)
    sys.path.insert(0, os.path.dirname(TESTS_DIR))

    print("=" * 70)
    print("V2M 2D SELECTIVE STATE-SPACE ENGINE - TEST SUITE")
    print("=" * 70)
    print()

    if args.module:
        print(f"Running tests from module: {args.module}\n")
        result, per_module = run_specific_test(args.module, verbosity, args.failfast)
    else:
        print(f"Running tests matching {args.pattern}...\n")
        result, per_module = run_tests(verbosity, args.pattern, args.failfast)

    if not args.no_summary:
        print_summary(result, per_module)

    sys.exit(0 if result.wasSuccessful() else 1)


if __name__ == '__main__':
    main()
