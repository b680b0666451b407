"""Deterministic discrete-event simulator for distributed lock protocols."""

__version__ = "0.1.0"
