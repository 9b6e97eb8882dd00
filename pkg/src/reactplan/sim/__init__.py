"""Scenario maps and the reactive traffic simulator."""

from .maps import SCENARIOS, ScenarioMap, get_map, load_map
from .world import (DT, EGO_ID, TIMEOUT, FlowConfig, SimulationError, Status, Verdict, World, judge,
                    observe, reset, step)

__all__ = [
    "SCENARIOS", "ScenarioMap", "get_map", "load_map", "DT", "EGO_ID", "TIMEOUT", "FlowConfig",
    "SimulationError", "Status", "Verdict", "World", "judge", "observe", "reset", "step",
]
