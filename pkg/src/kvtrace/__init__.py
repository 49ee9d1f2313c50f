"""Trace-driven KV-cache reuse analysis and two-tier cache simulation."""

__version__ = "0.1.0"
