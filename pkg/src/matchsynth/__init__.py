"""Matching-augmented synthetic control for shock-exposure panels."""

__version__ = "0.1.0"
