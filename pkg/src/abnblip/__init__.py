"""Abnormality-grounded CT report generation on a synthetic toy corpus."""

__version__ = "0.1.0"
