"""Discrete-event model of the APEnet+ 3D-torus interconnect."""

from apesim.errors import (
    ConfigError,
    FrameCorruptionError,
    ProtectionFault,
    ScheduleError,
    SimulationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FrameCorruptionError",
    "ProtectionFault",
    "ScheduleError",
    "SimulationError",
    "__version__",
]
