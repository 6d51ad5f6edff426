"""Desk-scale lab for turning attention layers of a small transformer into Mamba-2 layers."""

__version__ = "0.1.0"
