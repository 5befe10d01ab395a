"""Reference configuration of the three device groups.

The rack model G1(s) = 0.9359/(0.0890 s + 1) with a 5.0 s closed-loop delay
and the gain pairs (0.2, 0.05) inner / (0.15, 0.05) outer come from the
hardware identification. The HVAC and PV identifications were never
published: their plants, delays and inner gains below are stand-ins chosen
inside the observed 1-8 s delay range and tuned with the stability sweep.
They are configuration, not measured ground truth.
"""
from __future__ import annotations

from .model import FFPIParams, FirstOrderPlant, GroupModel, PIParams, TwoLevelModel

RACK_PLANT = FirstOrderPlant(0.9359, 0.0890)
RACK_DELAY = 5.0
RACK_PI = PIParams(0.2, 0.05)
OUTER_PI = PIParams(0.15, 0.05)

# stand-ins (unpublished)
HVAC_PLANT = FirstOrderPlant(0.9, 20.0)
HVAC_DELAY = 8.0
HVAC_PI = PIParams(0.5, 0.05)
PV_PLANT = FirstOrderPlant(1.0, 0.5)
PV_DELAY = 1.0
PV_PI = PIParams(0.2, 0.1)

PARTICIPATION = (0.5, 0.2, 0.3)

# lead-filter constants; every one is >= 2 * 0.01 s so the 10 ms control step resolves it
RACK_T_FILTER = 0.05
HVAC_T_FILTER = 5.0
PV_T_FILTER = 0.1


def rack_group(participation: float = PARTICIPATION[0], **overrides) -> GroupModel:
    ctrl = FFPIParams(RACK_PI, RACK_PLANT.time_constant, RACK_PLANT.gain, RACK_T_FILTER)
    g = GroupModel("racks", RACK_PLANT, RACK_DELAY, ctrl, participation)
    return g.with_(**overrides) if overrides else g


def hvac_group(participation: float = PARTICIPATION[1]) -> GroupModel:
    ctrl = FFPIParams(HVAC_PI, HVAC_PLANT.time_constant, HVAC_PLANT.gain, HVAC_T_FILTER)
    return GroupModel("hvac", HVAC_PLANT, HVAC_DELAY, ctrl, participation)


def pv_group(participation: float = PARTICIPATION[2]) -> GroupModel:
    ctrl = FFPIParams(PV_PI, PV_PLANT.time_constant, PV_PLANT.gain, PV_T_FILTER)
    return GroupModel("pv", PV_PLANT, PV_DELAY, ctrl, participation)


def default_model(outer: PIParams = OUTER_PI) -> TwoLevelModel:
    return TwoLevelModel((rack_group(), hvac_group(), pv_group()), outer)


def rack_loop(kp: float = RACK_PI.kp, ki: float = RACK_PI.ki) -> GroupModel:
    """The rack inner loop alone, as used for its gain design."""
    ctrl = FFPIParams(PIParams(kp, ki), RACK_PLANT.time_constant, RACK_PLANT.gain, RACK_T_FILTER)
    return GroupModel("racks", RACK_PLANT, RACK_DELAY, ctrl, 1.0)
