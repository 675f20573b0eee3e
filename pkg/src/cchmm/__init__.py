"""Causal conditional hidden Markov model for multimodal traffic forecasting."""

__version__ = "0.1.0"
