"""Desk-scale testbed for remote/local distributed real-time RL."""

__version__ = "0.1.0"
