"""Offline fixture: a fault-injectable pet store and canned scripted responses."""

from .scenarios import CannedScenario, canned_scenarios, iteration_responses, scenario, write_script_dir
from .server import FAULTS, RESET_PATH, FaultProfile, PortUnavailable, TestbedHandle, reset_state, start_testbed

__all__ = [
    "FAULTS",
    "RESET_PATH",
    "PortUnavailable",
    "CannedScenario",
    "FaultProfile",
    "TestbedHandle",
    "canned_scenarios",
    "iteration_responses",
    "reset_state",
    "scenario",
    "start_testbed",
    "write_script_dir",
]
