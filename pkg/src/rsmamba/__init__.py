"""Multi-path selective state space classifier for remote sensing imagery."""

__version__ = "0.1.0"
