"""Backdoor attacks (FSBA, BOBA) against a compact siamese tracker, with metrics, defenses and diagnostics."""

__version__ = "0.1.0"
