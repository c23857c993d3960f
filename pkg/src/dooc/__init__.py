"""Distributed optimal output consensus over unbalanced digraphs."""

__version__ = "0.1.0"

from dooc.errors import (
    AcceptanceError,
    DOOCError,
    DivergenceError,
    GainValidationError,
    ScenarioValidationError,
)
from dooc.models import Scenario, load_scenario, load_shipped
from dooc.sim import ClosedLoop, MetricsReport, Trajectory, metrics, run, run_many

__all__ = [
    "AcceptanceError",
    "ClosedLoop",
    "DOOCError",
    "DivergenceError",
    "GainValidationError",
    "MetricsReport",
    "Scenario",
    "ScenarioValidationError",
    "Trajectory",
    "load_scenario",
    "load_shipped",
    "metrics",
    "run",
    "run_many",
]
