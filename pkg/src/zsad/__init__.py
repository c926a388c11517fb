"""Zero-shot anomaly detection with hybrid prompt tuning of a toy frozen dual encoder."""

__version__ = "0.1.0"
