"""
Test suite for the V2M engine.

One module per source module; run with pytest or ./run_tests.py.
"""
