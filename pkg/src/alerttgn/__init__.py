"""Temporal graph learning on network alert streams with pluggable message aggregators."""

__version__ = "0.1.0"
