"""Stochastic cross-attention fine-tuning of small Vision Transformers."""

__version__ = "0.1.0"
