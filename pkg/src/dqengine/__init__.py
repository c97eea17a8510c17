"""Data-quality engine: assessment, anomaly detection and correction for tabular data."""

__version__ = "0.1.0"
