"""Audit whether machine unlearning deletes class information or only suppresses it."""

__version__ = "0.1.0"
