"""Segmented learning from demonstration with context-conditioned corrective primitives."""
__version__ = "0.1.0"
