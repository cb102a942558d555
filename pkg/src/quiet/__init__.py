"""Complex-valued density-matrix model for joint sarcasm, sentiment and emotion recognition."""

__version__ = "0.1.0"
