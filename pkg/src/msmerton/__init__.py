"""Multiscale Merton portfolio asymptotics."""

__version__ = "0.1.0"
