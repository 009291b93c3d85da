"""Prompt-driven feature diffusion for open-world semi-supervised learning."""

__version__ = "0.1.0"
