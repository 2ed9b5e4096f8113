"""Scaling limits of controlled birth/death populations: simulators, BSDE solvers and control checks."""
__version__ = "0.1.0"
