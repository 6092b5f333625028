"""Closed-loop traffic agent model behind a component-host coupling layer."""

__version__ = "0.1.0"
