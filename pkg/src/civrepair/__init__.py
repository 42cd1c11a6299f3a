"""Compartmentalization-aware automated repair of compartment interface vulnerabilities."""

__version__ = "0.1.0"
