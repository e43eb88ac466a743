"""Flexible GCN training with greedy graph selection (GraNT)."""

__version__ = "0.1.0"
