"""Fixed-step closed-loop (and open-loop baseline) simulation of the device fleet."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..controllers import coordinator_step, initial_coordinator_state
from ..model import FFPIParams
from ..scheduler import Assignment, FleetSpec, InfeasibleSchedule, schedule
from .fleet import GroupDevices
from .scenario import Scenario

log = logging.getLogger(__name__)

__all__ = ["SimTrace", "SimulationDiverged", "simulate_closed_loop", "write_trace_csv", "build_devices"]

POWER_LIMIT = 1e6  # kW


@dataclass(frozen=True, eq=False)
class SimTrace:
    """Uniformly sampled record; ``ref`` and ``power`` have one column per group."""

    t: np.ndarray
    target: np.ndarray
    obs: np.ndarray
    outer_cmd: np.ndarray
    ref: np.ndarray
    power: np.ndarray
    group_names: tuple[str, ...]
    dt: float
    events: tuple[str, ...] = ()
    diverged: bool = False

    @property
    def y(self) -> np.ndarray:
        return self.obs

    def columns(self) -> list[str]:
        cols = ["t", "target", "obs", "outer_cmd"]
        for i in range(len(self.group_names)):
            cols += [f"g{i + 1}_ref", f"g{i + 1}_p"]
        return cols

    def as_array(self) -> np.ndarray:
        parts = [self.t, self.target, self.obs, self.outer_cmd]
        for i in range(len(self.group_names)):
            parts += [self.ref[:, i], self.power[:, i]]
        return np.column_stack(parts)

    def truncated(self, n: int) -> "SimTrace":
        return replace(self, t=self.t[:n], target=self.target[:n], obs=self.obs[:n],
                       outer_cmd=self.outer_cmd[:n], ref=self.ref[:n], power=self.power[:n])


class SimulationDiverged(RuntimeError):
    def __init__(self, message: str, trace: SimTrace):
        super().__init__(message)
        self.trace = trace


def write_trace_csv(trace: SimTrace, path: str | Path) -> Path:
    path = Path(path)
    data = trace.as_array()
    with path.open("w", newline="") as fh:
        fh.write(",".join(trace.columns()) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")
    return path


def build_devices(scenario: Scenario, rng: np.random.Generator) -> list[GroupDevices]:
    """Draw per-device delays and biases; order of draws is fixed so a seed pins the fleet."""
    out = []
    for g in scenario.groups:
        fleet = g.fleet()
        on_banks = [b for b in g.banks if b.on_off]
        bank_idx, derating = [], []
        for k, b in enumerate(on_banks):
            bank_idx += [k] * b.count
            full = b.full_kw if b.full_kw is not None else b.kw
            derating.append((b.kw, full, b.count, b.exponent))
        ids = [d.id for d in fleet.on_off] + [d.id for d in fleet.continuous]
        n = len(ids)
        lo, hi = g.spread.delay_range
        blo, bhi = g.spread.bias_range
        delays = rng.uniform(lo, hi, n)
        bias = rng.uniform(blo, bhi, n)
        tc = np.full(n, g.spread.rise_time_constant or g.model.plant.time_constant)
        for j, dev in enumerate(ids):
            o = g.overrides.get(dev)
            if o:
                delays[j] = o.get("comm_delay", delays[j])
                bias[j] = o.get("true_gain_bias", bias[j])
                tc[j] = o.get("rise_time_constant", tc[j])
        steps = np.rint(delays / scenario.dt).astype(np.int64)
        out.append(GroupDevices(fleet, steps, tc, bias, np.array(bank_idx, dtype=np.int64), derating,
                                scenario.dt))
    return out


class _Noise:
    """Exact discretization of an Ornstein-Uhlenbeck process."""

    def __init__(self, sigma: float, tau: float, dt: float, rng: np.random.Generator):
        self.a = math.exp(-dt / tau)
        self.scale = sigma * math.sqrt(1.0 - self.a * self.a)
        self.rng = rng
        self.x = 0.0

    def next(self) -> float:
        x = self.x
        if self.scale > 0:
            self.x = self.a * self.x + self.scale * float(self.rng.standard_normal())
        return x


class _GroupPlant:
    """Single first-order plant with input dead time, integrated exactly under zero-order hold."""

    def __init__(self, gain: float, tc: float, delay: float, dt: float):
        self.gain = gain
        self.decay = math.exp(-dt / tc)
        self.d = int(round(delay / dt))
        if abs(self.d * dt - delay) > 1e-9 * max(1.0, delay):
            raise ValueError(f"group delay {delay} s is not a multiple of dt={dt}")
        self.queue = np.zeros(self.d + 1)
        self.head = 0
        self.p = 0.0
        self.frozen = False
        self.offline = False

    def push(self, cmd: float) -> None:
        self.head = (self.head + 1) % self.queue.size
        self.queue[self.head] = cmd

    def advance(self) -> float:
        if self.offline:
            self.p = 0.0
        elif not self.frozen:
            u = self.queue[(self.head - self.d) % self.queue.size]
            self.p = self.decay * self.p + (1.0 - self.decay) * self.gain * u
        return self.p


def _dispatch_group(dev: GroupDevices, command: float) -> np.ndarray:
    """Canonical (previous-free) assignment for the group command.

    Using the same assignment for the same command keeps the device mix a
    fixed function of the command; letting a min-switching tie-break pick
    among equal-power mixes makes the mix drift, and with derated and biased
    devices that drift shows up as real power swings.
    """
    fleet = dev.fleet
    c = min(max(command, fleet.min_power), fleet.capacity)
    dev.last_command = command
    if not fleet.continuous and dev.cache is not None and dev.cache[0] <= c <= dev.cache[1]:
        return dev.cache[2]
    try:
        a = schedule(fleet, c)
    except InfeasibleSchedule:
        a = schedule(fleet, fleet.min_power)
    dev.last_assignment = a
    vec = dev.command_vector(a)
    if not fleet.continuous:
        # nothing achievable lies in (W, c], so W stays optimal on [W, c]
        if dev.cache is not None and dev.cache[0] == a.total_power:
            dev.cache = (a.total_power, max(dev.cache[1], c), dev.cache[2])
        else:
            dev.cache = (a.total_power, c, vec)
    return vec


def _split(assignment: Assignment, fleets: list[FleetSpec]) -> list[Assignment]:
    parts = []
    for f in fleets:
        st = {d.id: assignment.statuses[d.id] for d in f.on_off}
        sp = {d.id: assignment.setpoints[d.id] for d in f.continuous}
        parts.append(Assignment(st, sp, assignment.power_of(f), assignment.power_of(f)))
    return parts


def simulate_closed_loop(scenario: Scenario) -> SimTrace:
    """Run the scenario on its fixed grid and return the sampled trace.

    Each step measures group powers and the uncontrollable load, runs the
    coordinator (closed loop) or the scheduler alone (open loop), queues the
    resulting device commands behind their dead times and advances the
    device dynamics by ``dt``.

    Raises :class:`InfeasibleSchedule` when no assignment exists at t = 0 and
    :class:`SimulationDiverged` when a power exceeds 1e6 kW.
    """
    sc = scenario
    dt, steps = sc.dt, sc.steps
    model = sc.model
    ng = len(sc.groups)
    names = tuple(g.name for g in sc.groups)
    seq = np.random.SeedSequence(sc.seed)
    fleet_rng, noise_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    noise = _Noise(sc.uncontrollable.sigma_kw, sc.uncontrollable.tau_s, dt, noise_rng)
    base_q = sc.uncontrollable.base_kw

    n = steps + 1
    t = np.arange(n) * dt
    target = np.array([sc.target.value(x) for x in t])
    obs = np.zeros(n)
    outer_cmd = np.zeros(n)
    refs = np.zeros((n, ng))
    power = np.zeros((n, ng))

    devices_mode = sc.plant_mode == "devices"
    if devices_mode:
        devs = build_devices(sc, fleet_rng)
        fleets = [d.fleet for d in devs]
        whole = fleets[0]
        for f in fleets[1:]:
            whole = whole + f
        first = schedule(whole, float(target[0]), base_q)  # InfeasibleSchedule propagates
        for d, part in zip(devs, _split(first, fleets)):
            d.prefill(d.command_vector(part))
            d.last_assignment = part
        plants = devs
        partition = fleets
        p_now = np.array([d.power(d.effective()) for d in devs])
    else:
        plants = [_GroupPlant(g.model.plant.gain, g.model.plant.time_constant, g.model.delay, dt)
                  for g in sc.groups]
        partition = None
        p_now = np.zeros(ng)

    closed = sc.mode == "closed_loop"
    hysteresis = [g.hysteresis_kw for g in sc.groups]
    state = initial_coordinator_state(model, partition, limits=devices_mode,
                                      deadbands=[g.deadband_kw for g in sc.groups])
    if closed and devices_mode:
        state = _warm_start(state, sc, [part.total_power for part in _split(first, fleets)], p_now)
    elif closed:
        # everything at rest, lead filters included
        state = replace(state, inner=tuple(replace(st, ff_filter=0.0, last_reference=0.0) for st in state.inner))

    faults = sorted(sc.faults, key=lambda f: f.time)
    fault_pos = 0
    events: list[str] = []
    ol_target = float(target[0])
    q_hist: list[float] = []
    q_sum = 0.0
    keep = max(1, int(round(sc.q_window_s / dt)))
    bases = np.array([p.last_assignment.total_power for p in plants]) if devices_mode else np.zeros(ng)

    for k in range(n):
        while fault_pos < len(faults) and faults[fault_pos].time <= t[k] + 1e-12:
            f = faults[fault_pos]
            i = names.index(f.group)
            if f.kind == "freeze":
                plants[i].frozen = True
            else:
                plants[i].offline = True
            events.append(f"t={t[k]:.3f}s fault {f.kind} on {f.group}")
            fault_pos += 1

        q = base_q + noise.next()
        obs[k] = float(p_now.sum()) + q
        power[k] = p_now
        if not np.all(np.abs(p_now) < POWER_LIMIT) or not math.isfinite(obs[k]):
            trace = SimTrace(t, target, obs, outer_cmd, refs, power, names, dt, tuple(events), True)
            raise SimulationDiverged(f"power exceeded {POWER_LIMIT:g} kW at t={t[k]:.3f}s", trace.truncated(k + 1))

        if closed:
            state, cmds = coordinator_step(state, model, partition, float(target[k]), tuple(p_now), q, dt,
                                           redispatch_threshold=sc.redispatch_threshold_kw,
                                           q_window=sc.q_window_s)
            refs[k] = state.group_refs
            outer_cmd[k] = state.outer.last_output
            if devices_mode:
                for d, c, hyst in zip(devs, cmds, hysteresis):
                    if d.last_command is None or abs(c - d.last_command) > hyst:
                        vec = _dispatch_group(d, c)
                    else:
                        vec = d.queue[d.head]
                    d.push(vec)
            else:
                for pl, c in zip(plants, cmds):
                    pl.push(c)
        else:
            q_hist.append(q)
            q_sum += q
            if len(q_hist) > keep:
                q_sum -= q_hist.pop(0)
            if abs(target[k] - ol_target) > sc.redispatch_threshold_kw:
                ol_target = float(target[k])
                try:
                    a = schedule(whole, ol_target, q_sum / len(q_hist))
                    for d, part in zip(devs, _split(a, fleets)):
                        d.last_assignment = part
                    bases = np.array([p.total_power for p in _split(a, fleets)])
                except InfeasibleSchedule as exc:
                    events.append(f"t={t[k]:.3f}s infeasible schedule: deficit {exc.deficit:.3f} kW")
            refs[k] = bases
            for d in devs:
                d.push(d.command_vector(d.last_assignment))

        if k < n - 1:
            p_now = np.array([pl.advance() for pl in plants])

    events = list(state.events) + events if closed else events
    return SimTrace(t, target, obs, outer_cmd, refs, power, names, dt, tuple(events), False)


def _warm_start(state, sc: Scenario, bases, p0):
    """Preload inner integrators so the first commands reproduce the initial dispatch."""
    inner = []
    for i, g in enumerate(sc.groups):
        st = state.inner[i]
        ctrl = g.model.controller
        if isinstance(ctrl, FFPIParams):
            z = bases[i] - bases[i] / ctrl.h_nom - ctrl.kp * (bases[i] - p0[i])
        else:
            z = bases[i] - ctrl.kp * (bases[i] - p0[i])
        inner.append(replace(st, pi=replace(st.pi, integrator=z)))
    return replace(state, inner=tuple(inner))
