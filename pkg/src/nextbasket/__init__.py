"""Predicts each user's next basket from purchase history and evolving profile records."""

__version__ = "0.1.0"
