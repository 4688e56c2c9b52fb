"""Precipitation nowcasting by decomposing each step into advection along a
motion field plus an additive intensity correction."""

__version__ = "0.1.0"
