"""Hybrid gain-scheduled control of switched LPV systems under hysteresis switching."""

__version__ = "0.1.0"
