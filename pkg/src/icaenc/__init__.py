"""Independent-component encoding models for continuous brain-response data."""

__version__ = "0.1.0"
