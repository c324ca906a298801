"""Continuous-time model-based RL with MLE confidence sets."""

__version__ = "0.1.0"
