"""Serialized-output-training toolkit for multi-talker recognition."""
__version__ = "0.1.0"
