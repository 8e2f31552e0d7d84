"""Test-time robust prefix-tuning on a desk-scale decoder-only LM."""

__version__ = "0.1.0"
