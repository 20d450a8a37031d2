"""Learned restoration of AC-feasible power flow states from simplified OPF solutions."""

__version__ = "0.1.0"
