"""Rotational stabilization of event and frame cameras, and translation-direction estimation from optical flow."""

__version__ = "0.1.0"
