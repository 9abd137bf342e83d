"""Learned uncertainty-torque calibration of momentum observers for floating-base robots."""

__version__ = "0.1.0"
