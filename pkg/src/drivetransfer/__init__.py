"""Zero-shot transfer of learned driving policies via robust reference tracking.

A nominal single-track vehicle hosts policy training; transfer experiments
replay those policies on perturbed vehicles either directly or through a
plan-and-track pipeline in which a disturbance-observer-equipped steering
controller follows short replanned reference trajectories.
"""

from .dynamics import VehicleParams, VehicleState
from .scenario import ScenarioConfig, DrivingTask, TrackingErrors

__version__ = "0.1.0"

__all__ = [
    "VehicleParams",
    "VehicleState",
    "ScenarioConfig",
    "DrivingTask",
    "TrackingErrors",
    "__version__",
]
