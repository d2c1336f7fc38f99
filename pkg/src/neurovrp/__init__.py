"""Neural solver for real-world vehicle routing variants at desk scale."""

__version__ = "0.1.0"
