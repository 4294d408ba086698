"""Cooperative UAV / ground-carrier delivery simulation and dispatching."""

__version__ = "0.1.0"
