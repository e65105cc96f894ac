"""Pseudo-spectral laboratory for the convective Brinkman-Forchheimer equations on a periodic torus."""
from __future__ import annotations

__version__ = "0.1.0"
