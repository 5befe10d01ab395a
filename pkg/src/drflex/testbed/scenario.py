"""Experiment description for the virtual testbed, loaded from one JSON document."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from ..model import FFPIParams, FirstOrderPlant, GroupModel, PIParams, TwoLevelModel
from ..scheduler import ContinuousLoad, FleetSpec, OnOffLoad

__all__ = [
    "Bank",
    "DeviceSpread",
    "GroupScenario",
    "TargetProfile",
    "NoiseSpec",
    "FaultEvent",
    "Scenario",
    "ScenarioError",
    "default_scenario",
    "load_scenario",
]

MODES = ("closed_loop", "open_loop")
PLANT_MODES = ("devices", "group")
FAULT_KINDS = ("freeze", "offline")


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario document."""


@dataclass(frozen=True)
class Bank:
    """A run of identical devices.

    On/off banks set ``kw`` (and optionally ``full_kw`` < ``kw`` for derating
    when many are on); continuous banks set ``kw_min``/``kw_max``.
    """

    prefix: str
    count: int
    kw: float | None = None
    full_kw: float | None = None
    exponent: float = 1.0
    kw_min: float | None = None
    kw_max: float | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ScenarioError(f"bank {self.prefix!r}: count must be >= 1")
        if (self.kw is None) == (self.kw_max is None):
            raise ScenarioError(f"bank {self.prefix!r}: give either kw (on/off) or kw_min/kw_max (continuous)")
        if self.on_off:
            full = self.full_kw if self.full_kw is not None else self.kw
            if not self.kw >= full > 0:
                raise ScenarioError(f"bank {self.prefix!r}: need kw >= full_kw > 0")

    @property
    def on_off(self) -> bool:
        return self.kw is not None

    def ids(self) -> list[str]:
        width = len(str(self.count - 1))
        return [f"{self.prefix}-{i:0{width}d}" for i in range(self.count)]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Bank":
        return cls(
            prefix=str(d["prefix"]),
            count=int(d.get("count", 1)),
            kw=_opt(d.get("kw")),
            full_kw=_opt(d.get("full_kw")),
            exponent=float(d.get("exponent", 1.0)),
            kw_min=_opt(d.get("kw_min", 0.0 if "kw_max" in d else None)),
            kw_max=_opt(d.get("kw_max")),
        )

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"prefix": self.prefix, "count": self.count}
        if self.on_off:
            out["kw"] = self.kw
            if self.full_kw is not None:
                out["full_kw"] = self.full_kw
                out["exponent"] = self.exponent
        else:
            out["kw_min"] = self.kw_min
            out["kw_max"] = self.kw_max
        return out


@dataclass(frozen=True)
class DeviceSpread:
    """Ranges from which per-device delay and gain bias are drawn uniformly."""

    delay_range: tuple[float, float] = (1.0, 8.0)
    bias_range: tuple[float, float] = (1.0, 1.0)
    rise_time_constant: float | None = None  # defaults to the group plant time constant

    def __post_init__(self):
        lo, hi = self.delay_range
        if not 0 <= lo <= hi:
            raise ScenarioError("delay_range must satisfy 0 <= lo <= hi")
        blo, bhi = self.bias_range
        if not 0 < blo <= bhi:
            raise ScenarioError("bias_range must satisfy 0 < lo <= hi")
        if self.rise_time_constant is not None and self.rise_time_constant <= 0:
            raise ScenarioError("rise_time_constant must be > 0")


@dataclass(frozen=True)
class GroupScenario:
    model: GroupModel
    banks: tuple[Bank, ...] = ()
    spread: DeviceSpread = field(default_factory=DeviceSpread)
    overrides: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    deadband_kw: float = 0.0
    hysteresis_kw: float = 0.0  # re-dispatch devices only when the group command moves further than this

    @property
    def name(self) -> str:
        return self.model.name

    def fleet(self) -> FleetSpec:
        on, cont = [], []
        for b in self.banks:
            if b.on_off:
                on.extend(OnOffLoad(i, b.kw) for i in b.ids())
            else:
                cont.extend(ContinuousLoad(i, b.kw_min, b.kw_max) for i in b.ids())
        return FleetSpec(tuple(on), tuple(cont))


@dataclass(frozen=True)
class TargetProfile:
    """Square wave between ``low`` and ``high`` or a list of (time, value) steps.

    The square wave holds ``low`` until ``start``, then toggles every
    ``period / 2`` seconds.
    """

    kind: str = "square"
    low: float = 0.0
    high: float = 0.0
    period: float = 1.0
    start: float = 0.0
    steps: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind == "square":
            if not self.period > 0:
                raise ScenarioError("square-wave period must be > 0")
        elif self.kind == "steps":
            if not self.steps:
                raise ScenarioError("step profile needs at least one (time, value) pair")
            times = [t for t, _ in self.steps]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ScenarioError("step times must be strictly increasing")
        else:
            raise ScenarioError(f"unknown target kind {self.kind!r}")

    def value(self, t: float) -> float:
        if self.kind == "square":
            if t < self.start:
                return self.low
            half = int(math.floor((t - self.start) / (self.period / 2.0)))
            return self.high if half % 2 == 0 else self.low
        v = self.steps[0][1]
        for ts, val in self.steps:
            if t >= ts:
                v = val
            else:
                break
        return v

    def events(self, duration: float) -> list[tuple[float, float, float]]:
        """(time, value before, value after) for every change inside (0, duration)."""
        out = []
        if self.kind == "square":
            k, t = 0, self.start
            while t < duration:
                if t > 0:
                    before, after = (self.low, self.high) if k % 2 == 0 else (self.high, self.low)
                    out.append((t, before, after))
                k += 1
                t = self.start + k * self.period / 2.0
        else:
            for (_, v0), (t1, v1) in zip(self.steps, self.steps[1:]):
                if 0 < t1 < duration and v1 != v0:
                    out.append((t1, v0, v1))
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TargetProfile":
        kind = d.get("kind", "square")
        if kind == "steps":
            return cls(kind="steps", steps=tuple((float(t), float(v)) for t, v in d["steps"]))
        return cls(kind=kind, low=float(d["low"]), high=float(d["high"]), period=float(d["period"]),
                   start=float(d.get("start", 0.0)))

    def to_dict(self) -> dict:
        if self.kind == "steps":
            return {"kind": "steps", "steps": [list(s) for s in self.steps]}
        return {"kind": "square", "low": self.low, "high": self.high, "period": self.period, "start": self.start}


@dataclass(frozen=True)
class NoiseSpec:
    """Ornstein-Uhlenbeck fluctuation (std ``sigma_kw``, correlation ``tau_s``) on the uncontrollable load."""

    base_kw: float = 0.0
    sigma_kw: float = 0.0
    tau_s: float = 5.0

    def __post_init__(self):
        if self.sigma_kw < 0:
            raise ScenarioError("sigma_kw must be >= 0")
        if not self.tau_s > 0:
            raise ScenarioError("tau_s must be > 0")


@dataclass(frozen=True)
class FaultEvent:
    time: float
    group: str
    kind: str

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ScenarioError(f"fault kind must be one of {FAULT_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class Scenario:
    name: str
    groups: tuple[GroupScenario, ...]
    outer: PIParams
    target: TargetProfile
    uncontrollable: NoiseSpec = field(default_factory=NoiseSpec)
    dt: float = 0.01
    duration: float = 100.0
    seed: int = 0
    faults: tuple[FaultEvent, ...] = ()
    mode: str = "closed_loop"
    plant_mode: str = "devices"
    redispatch_threshold_kw: float = 0.5
    q_window_s: float = 10.0

    def __post_init__(self):
        if not self.groups:
            raise ScenarioError("scenario needs at least one group")
        if not self.dt > 0:
            raise ScenarioError("dt must be > 0")
        if not self.duration >= self.dt:
            raise ScenarioError("duration must be >= dt")
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}")
        if self.plant_mode not in PLANT_MODES:
            raise ScenarioError(f"plant_mode must be one of {PLANT_MODES}")
        if self.plant_mode == "devices" and any(not g.banks for g in self.groups):
            raise ScenarioError("device plant mode needs a non-empty bank list for every group")
        if self.mode == "open_loop" and self.plant_mode != "devices":
            raise ScenarioError("open-loop mode dispatches devices and needs plant_mode 'devices'")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ScenarioError("group names must be unique")
        for f in self.faults:
            if f.group not in names:
                raise ScenarioError(f"fault refers to unknown group {f.group!r}")
        try:
            self.model
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc

    @property
    def model(self) -> TwoLevelModel:
        return TwoLevelModel(tuple(g.model for g in self.groups), self.outer)

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def linear(self) -> "Scenario":
        """Group-level first-order plants starting at rest, no noise, faults,
        deadbands or dispatch hysteresis: the configuration the assembled delay
        model describes."""
        groups = tuple(replace(g, deadband_kw=0.0, hysteresis_kw=0.0) for g in self.groups)
        return replace(self, groups=groups, plant_mode="group", mode="closed_loop", faults=(),
                       uncontrollable=NoiseSpec(0.0, 0.0, self.uncontrollable.tau_s))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        try:
            groups = tuple(_group_from_dict(g) for g in d["groups"])
            sim = d.get("sim", {})
            noise = d.get("uncontrollable", {})
            return cls(
                name=str(d.get("name", "scenario")),
                groups=groups,
                outer=PIParams(float(d["outer"]["kp"]), float(d["outer"]["ki"])),
                target=TargetProfile.from_dict(d["target"]),
                uncontrollable=NoiseSpec(float(noise.get("base_kw", 0.0)), float(noise.get("sigma_kw", 0.0)),
                                         float(noise.get("tau_s", 5.0))),
                dt=float(sim.get("dt", 0.01)),
                duration=float(sim.get("duration", 100.0)),
                seed=int(sim.get("seed", 0)),
                faults=tuple(FaultEvent(float(f["time"]), str(f["group"]), str(f["kind"]))
                             for f in d.get("faults", [])),
                mode=str(d.get("mode", "closed_loop")),
                plant_mode=str(d.get("plant_mode", "devices")),
                redispatch_threshold_kw=float(d.get("redispatch_threshold_kw", 0.5)),
                q_window_s=float(d.get("q_window_s", 10.0)),
            )
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"malformed scenario: {exc!r}") from exc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "plant_mode": self.plant_mode,
            "sim": {"dt": self.dt, "duration": self.duration, "seed": self.seed},
            "outer": {"kp": self.outer.kp, "ki": self.outer.ki},
            "target": self.target.to_dict(),
            "uncontrollable": {"base_kw": self.uncontrollable.base_kw, "sigma_kw": self.uncontrollable.sigma_kw,
                               "tau_s": self.uncontrollable.tau_s},
            "redispatch_threshold_kw": self.redispatch_threshold_kw,
            "q_window_s": self.q_window_s,
            "groups": [_group_to_dict(g) for g in self.groups],
            "faults": [{"time": f.time, "group": f.group, "kind": f.kind} for f in self.faults],
        }


def _opt(v):
    return None if v is None else float(v)


def _group_from_dict(d: Mapping[str, Any]) -> GroupScenario:
    plant = FirstOrderPlant(float(d["plant"]["gain"]), float(d["plant"]["time_constant"]))
    c = d["controller"]
    pi = PIParams(float(c["kp"]), float(c["ki"]))
    if c.get("feedforward", True):
        t_ff = float(c.get("t_ff", plant.time_constant))
        ctrl = FFPIParams(pi, t_ff, float(c.get("h_nom", plant.gain)), _opt(c.get("t_filter")))
    else:
        ctrl = pi
    model = GroupModel(str(d["name"]), plant, float(d["delay"]), ctrl, float(d.get("participation", 1.0)))
    dyn = d.get("dynamics", {})
    spread = DeviceSpread(
        tuple(float(x) for x in dyn.get("delay_range", (1.0, 8.0))),
        tuple(float(x) for x in dyn.get("bias_range", (1.0, 1.0))),
        _opt(dyn.get("rise_time_constant")),
    )
    banks = tuple(Bank.from_dict(b) for b in d.get("banks", []))
    overrides = {str(k): {kk: float(vv) for kk, vv in v.items()} for k, v in d.get("device_overrides", {}).items()}
    return GroupScenario(model, banks, spread, overrides, float(d.get("deadband_kw", 0.0)),
                         float(d.get("hysteresis_kw", 0.0)))


def _group_to_dict(g: GroupScenario) -> dict:
    m = g.model
    if isinstance(m.controller, FFPIParams):
        c = m.controller
        ctrl = {"kp": c.kp, "ki": c.ki, "t_ff": c.t_ff, "h_nom": c.h_nom, "t_filter": c.t_filter}
    else:
        ctrl = {"kp": m.controller.kp, "ki": m.controller.ki, "feedforward": False}
    dyn = {"delay_range": list(g.spread.delay_range), "bias_range": list(g.spread.bias_range)}
    if g.spread.rise_time_constant is not None:
        dyn["rise_time_constant"] = g.spread.rise_time_constant
    out = {
        "name": m.name,
        "plant": {"gain": m.plant.gain, "time_constant": m.plant.time_constant},
        "delay": m.delay,
        "controller": ctrl,
        "participation": m.participation,
        "deadband_kw": g.deadband_kw,
        "hysteresis_kw": g.hysteresis_kw,
        "banks": [b.to_dict() for b in g.banks],
        "dynamics": dyn,
    }
    if g.overrides:
        out["device_overrides"] = {k: dict(v) for k, v in g.overrides.items()}
    return out


def load_scenario(path: str | Path) -> Scenario:
    """Read a scenario JSON file; ``"default"`` selects the packaged reference scenario."""
    if str(path) == "default":
        return default_scenario()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {p}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: invalid JSON ({exc})") from exc
    return Scenario.from_dict(data)


def default_scenario_text() -> str:
    return resources.files("drflex.data").joinpath("default_scenario.json").read_text()


def default_scenario() -> Scenario:
    return Scenario.from_dict(json.loads(default_scenario_text()))


def group_index(groups: Sequence[GroupScenario], name: str) -> int:
    for i, g in enumerate(groups):
        if g.name == name:
            return i
    raise ScenarioError(f"unknown group {name!r}")
