"""Constrained task and motion planning for simulated chemistry-lab experiments."""

__version__ = "0.1.0"
