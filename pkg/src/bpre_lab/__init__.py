"""Simulation and verification toolkit for intermediately subcritical
branching processes in random environment."""

__version__ = "0.1.0"
