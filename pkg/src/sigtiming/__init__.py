"""Pre-timed signal timing estimation from probe-vehicle trajectories."""

from .core import DomainError, SignalPlan, StopEvent, Trajectory
from .pipeline import ConfigError, RunConfig, run_pipeline

__all__ = ["ConfigError", "DomainError", "RunConfig", "SignalPlan", "StopEvent", "Trajectory", "run_pipeline"]
