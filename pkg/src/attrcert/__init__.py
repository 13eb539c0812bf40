"""Certified robustness of uniformly smoothed attributions."""
from __future__ import annotations

__version__ = "0.1.0"
