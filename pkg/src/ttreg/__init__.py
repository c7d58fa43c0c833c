"""Robust sparse tensor-response regression with tensor t errors."""

__version__ = "0.1.0"
