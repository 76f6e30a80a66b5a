"""Reinforcement-learned reduced-order estimators for a forced Burgers flow."""

__version__ = "0.1.0"
