"""Desk-scale laboratory for adversarially robust self-supervised learning."""

__version__ = "0.1.0"
