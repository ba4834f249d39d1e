"""Macroscopic freeway simulation with general-purpose and managed lanes."""
from .calibration import CalibrationReport, OfframpTarget, calibrate
from .engine import Controls, SimOutput, SimulationError, Simulator
from .network import Network, build_full_access, build_gated_access, validate
from .scenario import ScenarioConfig, ScenarioError, parse_scenario

__all__ = [
    "CalibrationReport", "Controls", "Network", "OfframpTarget", "ScenarioConfig", "ScenarioError", "SimOutput",
    "SimulationError", "Simulator", "build_full_access", "build_gated_access", "calibrate", "parse_scenario",
    "validate",
]
__version__ = "0.1.0"
