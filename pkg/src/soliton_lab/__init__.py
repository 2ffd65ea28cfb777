"""Numerical laboratory for asymptotic stability of NLS ground states."""
__version__ = "0.1.0"
