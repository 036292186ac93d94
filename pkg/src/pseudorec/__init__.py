"""Continual-learning experiments with generative replay on numpy."""

__version__ = "0.1.0"
