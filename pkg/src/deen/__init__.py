"""Diverse embedding expansion for visible-infrared re-identification, at desk scale."""

__version__ = "0.1.0"
