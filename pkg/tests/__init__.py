"""
Test suite for riskdrive.

Slow learning checks are marked ``slow``; run ``pytest -m "not slow"`` for
the quick suite.
"""
