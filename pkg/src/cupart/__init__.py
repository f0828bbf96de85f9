"""Learned CU partition prediction for quad-tree video coding."""

__version__ = "0.1.0"
