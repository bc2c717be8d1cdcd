"""Geometric transform attention toolkit."""
from . import groups, reps

__all__ = ["groups", "reps"]
__version__ = "0.1.0"
