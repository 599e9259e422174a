"""Toric conical Kahler-Einstein and Kahler-Ricci soliton metrics from polytopes."""

__version__ = "0.1.0"
