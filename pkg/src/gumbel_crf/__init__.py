"""Structured sampling and gradient estimation for linear-chain CRFs."""

__version__ = "0.1.0"
