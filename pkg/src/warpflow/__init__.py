"""Ricci flow on doubly warped products: solver, barriers, soliton profiles."""
__version__ = "0.1.0"
