"""Weeding-robot control stack over a deterministic simulated pasture."""

__version__ = "0.1.0"
