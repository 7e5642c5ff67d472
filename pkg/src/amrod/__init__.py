"""Continual test-time adaptation of a toy two-stage detector on shifting synthetic streams."""

from .config import RunConfig, long_term_config, short_term_config
from .engine import Engine, StepResult
from .evaluation import RunSummary
from .monitor import Decision
from .runner import RunResult, run
from .toydet import Box, Detection, Image, ParamStore

__all__ = [
    "Box",
    "Decision",
    "Detection",
    "Engine",
    "Image",
    "ParamStore",
    "RunConfig",
    "RunResult",
    "RunSummary",
    "StepResult",
    "long_term_config",
    "run",
    "short_term_config",
]
