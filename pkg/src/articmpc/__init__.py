"""Whole-body MPC toolkit for mobile manipulation of articulated objects."""
__version__ = "0.1.0"
