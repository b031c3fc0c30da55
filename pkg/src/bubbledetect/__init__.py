"""Detect asset-price bubbles (strict local martingales) from call surfaces."""

__version__ = "0.1.0"
