"""Estimate the latent state of urban incidents from crowdsourced reports and sparse ratings."""
from __future__ import annotations

__version__ = "0.1.0"

from ._accel import backend_name  # noqa: F401
