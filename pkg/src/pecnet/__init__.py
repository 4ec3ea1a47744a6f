"""Endpoint-conditioned multi-modal pedestrian trajectory forecasting."""

__version__ = "0.1.0"
