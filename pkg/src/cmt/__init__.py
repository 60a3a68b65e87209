"""Contextual meta transformer: prompt-tuned trajectory modelling for offline RL."""

__version__ = "0.1.0"
