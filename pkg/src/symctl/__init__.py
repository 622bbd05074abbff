"""Abstraction-based controller synthesis for discrete-time nonlinear systems."""

__version__ = "0.1.0"
