"""Stability-constrained optimal power flow with a learned frequency-stability classifier."""

__version__ = "0.1.0"
