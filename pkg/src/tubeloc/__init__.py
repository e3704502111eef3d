"""Weakly-supervised spatio-temporal action localization with human tubes."""

from tubeloc.core import BoundingBox, TemporalSegment, Tube

__version__ = "0.1.0"

__all__ = ["BoundingBox", "TemporalSegment", "Tube", "__version__"]
