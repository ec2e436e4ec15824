"""Data-driven tracking MPC from Hankel-matrix trajectory parametrizations."""

__version__ = "0.1.0"
