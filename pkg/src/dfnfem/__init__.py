"""Finite element solver for the Doyle-Fuller-Newman lithium-ion cell model."""

__version__ = "0.1.0"
