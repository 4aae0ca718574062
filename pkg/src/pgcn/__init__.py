"""Tile-prediction anomaly detection with windowed-attention generation and siamese comparison."""

__version__ = "0.1.0"
