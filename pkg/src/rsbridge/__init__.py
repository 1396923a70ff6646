"""Discrete-time Schrödinger bridges trained by iterative proportional fitting."""

__version__ = "0.1.0"
