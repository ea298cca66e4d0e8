"""Desk-scale open-vocabulary object attribute recognition toolkit."""

__version__ = "0.1.0"
