"""Desk-scale laboratory for staged transfer learning on synthetic vascular images."""

__version__ = "0.1.0"
