"""Multi-frame detection of small flying birds in surveillance video."""

__version__ = "0.1.0"
