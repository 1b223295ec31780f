"""Deterministic federated-averaging simulator with quantized communication."""

__version__ = "0.1.0"
