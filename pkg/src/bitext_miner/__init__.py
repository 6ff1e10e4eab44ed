"""Bitext mining with a bidirectional dual encoder trained with additive margin softmax."""

__version__ = "0.1.0"
