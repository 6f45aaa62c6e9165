"""Path-loss distributions for several UAV altitudes from a top-down image,
and coverage-maximizing altitude selection."""

__version__ = "0.1.0"
