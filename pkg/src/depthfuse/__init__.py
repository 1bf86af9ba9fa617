"""Desk-scale RGB-D depth completion toolkit."""

__version__ = "0.1.0"
