"""Sidelink localization with multiple reconfigurable intelligent surfaces."""

__version__ = "0.1.0"
