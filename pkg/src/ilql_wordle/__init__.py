"""Implicit language Q-learning and its baselines on token-level Wordle."""

__version__ = "0.1.0"
