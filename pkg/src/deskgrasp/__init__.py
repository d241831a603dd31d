"""Desk-scale grasp pipeline: RL specialists distilled into one universal policy."""

__version__ = "0.1.0"
