"""KV-cache constrained scheduling of LLM inference requests."""

from .core import Instance, Metrics, Request, Schedule, tel, validate_schedule
from .engine import DurationModel, RunReport, run
from .schedulers import PolicyConfig

__all__ = [
    "DurationModel",
    "Instance",
    "Metrics",
    "PolicyConfig",
    "Request",
    "RunReport",
    "Schedule",
    "run",
    "tel",
    "validate_schedule",
]

__version__ = "0.1.0"
