"""Desk-scale multi-teacher feature distillation."""

__version__ = "0.1.0"
