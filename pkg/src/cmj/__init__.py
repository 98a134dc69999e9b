"""Simulation and verification toolkit for supercritical multi-type general branching processes."""

__version__ = "0.1.0"
