"""Prototype-conditioned token fusion with a routed+shared Mixture-of-Experts Transformer for 3D gaze regression."""

__version__ = "0.1.0"
