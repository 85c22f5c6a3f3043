"""Desk-scale video-to-soundtrack generator and its evaluation suite."""

__version__ = "0.1.0"
