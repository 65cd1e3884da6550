"""Federated intrusion detection with per-client distillation and prototype sharing."""

__version__ = "0.1.0"
