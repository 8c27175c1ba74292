"""Federated learning with DP-SGD, demographic-parity regularization and RDP accounting."""

__version__ = "0.1.0"
