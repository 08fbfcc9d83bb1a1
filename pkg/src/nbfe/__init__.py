"""Bounded foresight equilibrium solvers for heterogeneous-agent models with aggregate shocks."""

__version__ = "0.1.0"
