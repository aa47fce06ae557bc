"""Factorized neural transducer lab: training, text-only adaptation and decoding at desk scale."""

__version__ = "0.1.0"
