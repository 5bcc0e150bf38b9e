"""Nonlinear modal coupling analysis and shape optimization of extruded structures."""

__version__ = "0.1.0"
