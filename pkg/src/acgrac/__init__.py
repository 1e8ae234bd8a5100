"""acgrac: adaptive atomistic/continuum coupling on 2D triangular lattices."""

__version__ = "0.1.0"
