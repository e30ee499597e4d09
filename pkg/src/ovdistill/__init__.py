"""Desk-scale open-vocabulary detection with contextual attention distillation."""

__version__ = "0.1.0"
