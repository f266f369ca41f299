"""Virtual fundamental chains of Kuranishi structures, computed on finite models."""

from __future__ import annotations

from .errors import VfckitError
from .report import Check, Report

__version__ = "0.1.0"

__all__ = ["VfckitError", "Check", "Report", "__version__"]
