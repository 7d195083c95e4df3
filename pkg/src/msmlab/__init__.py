"""Masked symbol modeling for oversampled, pulse-shaped baseband signals."""

__version__ = "0.1.0"
