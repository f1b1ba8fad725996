"""Synthetic-image replacement pipeline with privacy, utility, and fairness auditing."""

__version__ = "0.1.0"
