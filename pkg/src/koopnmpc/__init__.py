"""Wiener-type Koopman models and structure-exploiting NMPC."""

__version__ = "0.1.0"
