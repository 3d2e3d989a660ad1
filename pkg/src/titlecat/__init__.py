"""Consistency-aware hierarchical categorization of product titles."""

__version__ = "0.1.0"
