"""
Evaluation framework for SDF-based localization.

Runs a suite of synthetic sequences through the pipeline and aggregates trajectory and
structure accuracy.
"""

__version__ = "0.1.0"
