"""Desk-scale hybrid CTC/attention recognizer with a one-cross decoder."""

__version__ = "0.1.0"
