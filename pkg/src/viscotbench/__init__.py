"""Robustness benchmarking toolkit for visual chain-of-thought pipelines."""

__version__ = "0.1.0"
