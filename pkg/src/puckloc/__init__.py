"""Puck localisation from broadcast-style hockey clips via heatmap regression."""

__version__ = "0.1.0"
