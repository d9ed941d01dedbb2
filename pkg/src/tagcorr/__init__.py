"""Coincidence retrieval between photon streams from independently clocked time taggers."""

__version__ = "0.1.0"

from .kernels import BACKEND
from .timebase import ClockModel, PhaseSeries, TimestampStream, apply_clock, invert_clock

__all__ = [
    "BACKEND",
    "ClockModel",
    "PhaseSeries",
    "TimestampStream",
    "apply_clock",
    "invert_clock",
    "__version__",
]
