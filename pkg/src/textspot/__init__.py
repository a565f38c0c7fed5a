"""Desk-scale end-to-end text spotting on self-generated curved-text scenes."""

__version__ = "0.1.0"
