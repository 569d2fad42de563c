"""Regime-aware market simulation and portfolio-policy engine."""

__version__ = "0.1.0"
