"""Street-view time-series change detection pipeline."""

__version__ = "0.1.0"
