"""Bellman operators, learned operator blocks and residual stacks for delta-held control."""

__version__ = "0.1.0"
