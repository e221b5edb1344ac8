"""Constrained intrinsic motivation: skill discovery and adaptive exploration bonuses."""

__version__ = "0.1.0"
