"""Multiprocess state space models with feedback and switching."""

__version__ = "1.0.1"
