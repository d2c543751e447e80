"""Projected distributions over sparse weighted DAGs."""
__version__ = "0.1.0"
