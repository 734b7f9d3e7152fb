"""Numerical laboratory for the degenerate parabolic equation ``y_t = (x^alpha y_x)_x``."""

__version__ = "0.1.0"
