"""Text-augmented causal analysis of observational patient data."""

__version__ = "0.1.0"
