"""Desk-scale federated learning simulator with domain-specific prototypes."""

__version__ = "0.1.0"
