"""Federated detection of malicious HTTP traffic from border logs."""

__version__ = "0.1.0"
