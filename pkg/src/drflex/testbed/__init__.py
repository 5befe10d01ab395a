"""Virtual testbed: device-level fleet simulation and a delay-equation integrator."""
from .dde import DDETrace, default_dt, simulate_dde
from .fleet import DeviceDynamics, RackGroup, aggregate_rack_power, derated_unit_power
from .scenario import (
    Bank,
    DeviceSpread,
    FaultEvent,
    GroupScenario,
    NoiseSpec,
    Scenario,
    ScenarioError,
    TargetProfile,
    default_scenario,
    load_scenario,
)
from .simulate import SimTrace, SimulationDiverged, simulate_closed_loop, write_trace_csv

__all__ = [
    "DDETrace", "default_dt", "simulate_dde",
    "DeviceDynamics", "RackGroup", "aggregate_rack_power", "derated_unit_power",
    "Bank", "DeviceSpread", "FaultEvent", "GroupScenario", "NoiseSpec", "Scenario", "ScenarioError",
    "TargetProfile", "default_scenario", "load_scenario",
    "SimTrace", "SimulationDiverged", "simulate_closed_loop", "write_trace_csv",
]
