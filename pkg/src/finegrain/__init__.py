"""Desk-scale vision-language pretraining and fine-grained evaluation lab."""

__version__ = "0.1.0"
