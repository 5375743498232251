"""Uncertainty-based OOD detection for graph classification under a leave-one-class-out protocol."""

__version__ = "0.1.0"
