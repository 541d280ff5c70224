"""Simulation, estimation and feedback control of a homodyne-monitored qubit."""

__version__ = "0.1.0"
