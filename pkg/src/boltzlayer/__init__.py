"""Discrete-velocity boundary-layer solver for the hard-sphere Boltzmann equation."""

__version__ = "0.1.0"
