"""Interaction-aware planning with online-learned motion prediction."""

__version__ = "0.1.0"
