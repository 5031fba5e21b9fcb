"""Conditional adapter layers with a learned soft top-k token router."""

__version__ = "0.1.0"
