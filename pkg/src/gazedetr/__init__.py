"""Desk-scale GazeDETR."""
__version__ = "0.1.0"
