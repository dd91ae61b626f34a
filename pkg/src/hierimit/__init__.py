"""Hierarchical manipulation policies from unlabeled 6D-pose demonstrations."""

__version__ = "0.1.0"
