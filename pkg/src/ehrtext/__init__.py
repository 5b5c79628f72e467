"""Event-text patient sequence models for multi-hospital EHR prediction."""

__version__ = "0.1.0"
