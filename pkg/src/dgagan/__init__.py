"""Attention-guided adversarial synthesis of longitudinal lesion images."""

__version__ = "0.1.0"
