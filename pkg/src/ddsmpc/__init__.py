"""Data-driven stochastic MPC with polynomial chaos over Hankel representations."""

__version__ = "0.1.0"
