"""Multi-base logarithmic number system arithmetic and low-precision training."""

__version__ = "0.1.0"
