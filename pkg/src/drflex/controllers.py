"""Discrete-time PI, feed-forward PI and the two-level coordinator.

States are small immutable values; every ``*_step`` returns a new state
together with its output.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from .model import FFPIParams, PIParams, TwoLevelModel
from .scheduler import Assignment, FleetSpec, InfeasibleSchedule, schedule

log = logging.getLogger(__name__)

__all__ = [
    "PIState",
    "FFPIState",
    "CoordinatorState",
    "pi_step",
    "ffpi_step",
    "coordinator_step",
    "initial_coordinator_state",
    "REDISPATCH_THRESHOLD",
]

REDISPATCH_THRESHOLD = 0.5  # kW
Q_WINDOW = 10.0  # s, uncontrollable-load moving average


@dataclass(frozen=True)
class PIState:
    integrator: float = 0.0
    last_output: float = 0.0
    limits: tuple[float, float] | None = None

    def __post_init__(self):
        if not math.isfinite(self.integrator):
            raise ValueError("PI integrator diverged")


@dataclass(frozen=True)
class FFPIState:
    pi: PIState = field(default_factory=PIState)
    ff_filter: float | None = None  # low-pass state of the lead filter, kW
    last_reference: float | None = None


def pi_step(state: PIState, params: PIParams, error: float, dt: float, *,
            feedforward: float = 0.0, deadband: float = 0.0) -> tuple[PIState, float]:
    """One PI update; output = kp*error + integrator (+ feedforward), then clipped.

    The integrator advances by ki*error*dt unless the output is saturated and
    the error pushes further out, in which case it is clamped at the value
    that puts the output exactly on the limit (conditional integration).
    Errors inside ``deadband`` do not integrate.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    raw = params.kp * error + state.integrator + feedforward
    out = raw
    z = state.integrator
    if abs(error) > deadband:
        z = z + params.ki * error * dt
    if state.limits is not None:
        lo, hi = state.limits
        out = min(max(raw, lo), hi)
        ceiling = hi - params.kp * error - feedforward
        floor = lo - params.kp * error - feedforward
        if error > 0 and z > ceiling:
            z = max(state.integrator, ceiling)
        elif error < 0 and z < floor:
            z = min(state.integrator, floor)
    return PIState(z, out, state.limits), out


def _lead(params: FFPIParams, state: FFPIState, reference: float, dt: float) -> tuple[float, float]:
    """Trapezoidal update of (s t_ff + 1)/(h_nom (s t_f + 1)); returns (filter state, output)."""
    if state.ff_filter is None:
        q = reference
    else:
        c = dt / (2.0 * params.t_filter)
        q = ((1.0 - c) * state.ff_filter + c * (reference + state.last_reference)) / (1.0 + c)
    lead = params.t_ff / params.t_filter
    return q, (lead * reference + (1.0 - lead) * q) / params.h_nom


def ffpi_step(state: FFPIState, params: FFPIParams, reference: float, measurement: float,
              dt: float, *, deadband: float = 0.0) -> tuple[FFPIState, float]:
    """Command = PI on (reference - measurement) plus the lead-filtered reference."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if dt > params.t_filter / 2.0 + 1e-15:
        raise ValueError(f"dt={dt} too coarse for the feed-forward filter (t_filter={params.t_filter})")
    q, w = _lead(params, state, reference, dt)
    pi, cmd = pi_step(state.pi, params.pi, reference - measurement, dt, feedforward=w, deadband=deadband)
    return FFPIState(pi, q, reference), cmd


@dataclass(frozen=True)
class CoordinatorState:
    outer: PIState
    inner: tuple[FFPIState, ...]
    current_assignment: Assignment | None
    group_refs: tuple[float, ...]
    bases: tuple[float, ...]
    dispatch_target: float | None = None
    q_samples: tuple[float, ...] = ()
    q_sum: float = 0.0
    events: tuple[str, ...] = ()
    deadbands: tuple[float, ...] = ()

    @property
    def q_estimate(self) -> float:
        return self.q_sum / len(self.q_samples) if self.q_samples else 0.0


def initial_coordinator_state(
    model: TwoLevelModel,
    partition: Sequence[FleetSpec] | None = None,
    *,
    limits: bool = True,
    deadbands: Sequence[float] | None = None,
) -> CoordinatorState:
    """Fresh coordinator; commands are saturated to [0, group capacity] when ``limits``."""
    ng = len(model.groups)
    if partition is not None and len(partition) != ng:
        raise ValueError("one fleet per group required")
    inner = []
    for i in range(ng):
        lim = (0.0, partition[i].capacity) if (limits and partition is not None) else None
        inner.append(FFPIState(PIState(limits=lim)))
    outer_lim = None
    if limits and partition is not None:
        cap = math.fsum(f.capacity for f in partition)
        outer_lim = (-cap, cap)
    db = tuple(deadbands) if deadbands is not None else (0.0,) * ng
    return CoordinatorState(PIState(limits=outer_lim), tuple(inner), None, (0.0,) * ng, (0.0,) * ng,
                            deadbands=db)


def _group_bases(assignment: Assignment, partition: Sequence[FleetSpec]) -> tuple[float, ...]:
    return tuple(assignment.power_of(f) for f in partition)


def coordinator_step(
    state: CoordinatorState,
    model: TwoLevelModel,
    partition: Sequence[FleetSpec] | None,
    target: float,
    group_measurements: Sequence[float],
    uncontrollable: float,
    dt: float,
    *,
    redispatch_threshold: float = REDISPATCH_THRESHOLD,
    q_window: float = Q_WINDOW,
) -> tuple[CoordinatorState, tuple[float, ...]]:
    """Advance the two-level structure by one control period.

    The building error drives the outer PI; its output is split by the
    participation factors on top of the scheduler's per-group base powers,
    and each inner FF-PI tracks its group reference. The whole-fleet
    scheduler re-runs only when the target moves by more than
    ``redispatch_threshold`` kW since the last dispatch.
    """
    ng = len(model.groups)
    if len(group_measurements) != ng:
        raise ValueError(f"expected {ng} group measurements, got {len(group_measurements)}")
    if not dt > 0:
        raise ValueError("dt must be > 0")

    samples, q_sum = state.q_samples, state.q_sum
    keep = max(1, int(round(q_window / dt)))
    samples = samples + (uncontrollable,)
    q_sum += uncontrollable
    if len(samples) > keep:
        q_sum -= samples[0]
        samples = samples[1:]
    q_hat = q_sum / len(samples)

    assignment, bases, events = state.current_assignment, state.bases, state.events
    dispatch_target = state.dispatch_target
    if partition is not None and (dispatch_target is None or abs(target - dispatch_target) > redispatch_threshold):
        fleet = partition[0]
        for f in partition[1:]:
            fleet = fleet + f
        try:
            assignment = schedule(fleet, target, q_hat)
            bases = _group_bases(assignment, partition)
        except InfeasibleSchedule as exc:
            bases = tuple(f.min_power for f in partition)
            assignment = None
            events = events + (f"infeasible schedule at target {target:.3f} kW: deficit {exc.deficit:.3f} kW",)
            log.warning(events[-1])
        dispatch_target = target

    err = target - (math.fsum(group_measurements) + uncontrollable)
    outer, delta = pi_step(state.outer, model.outer, err, dt)
    refs, inner, commands = [], [], []
    for i, g in enumerate(model.groups):
        r = bases[i] + g.participation * delta
        db = state.deadbands[i] if state.deadbands else 0.0
        if isinstance(g.controller, FFPIParams):
            st, cmd = ffpi_step(state.inner[i], g.controller, r, group_measurements[i], dt, deadband=db)
        else:
            pi, cmd = pi_step(state.inner[i].pi, g.controller, r - group_measurements[i], dt, deadband=db)
            st = replace(state.inner[i], pi=pi)
        refs.append(r)
        inner.append(st)
        commands.append(cmd)
    new = CoordinatorState(outer, tuple(inner), assignment, tuple(refs), bases, dispatch_target,
                           samples, q_sum, events, state.deadbands)
    return new, tuple(commands)
