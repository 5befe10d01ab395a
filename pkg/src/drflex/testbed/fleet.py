"""Device-level fleet dynamics: dead time, first-order rise, gain bias and derating."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..scheduler import Assignment, FleetSpec, OnOffLoad

__all__ = [
    "DeviceDynamics",
    "RackGroup",
    "aggregate_rack_power",
    "derated_unit_power",
    "GroupDevices",
]


@dataclass(frozen=True)
class DeviceDynamics:
    comm_delay: float = 0.0
    rise_time_constant: float = 0.1
    true_gain_bias: float = 1.0

    def __post_init__(self):
        if self.comm_delay < 0:
            raise ValueError("comm_delay must be >= 0")
        if self.rise_time_constant <= 0:
            raise ValueError("rise_time_constant must be > 0")
        if self.true_gain_bias <= 0:
            raise ValueError("true_gain_bias must be > 0")


@dataclass(frozen=True)
class RackGroup:
    """On/off devices that share a supply, so per-unit power sags as more switch on.

    With ``n`` devices on, each draws
    ``solo - (solo - full) * ((n - 1) / (N - 1)) ** exponent`` instead of its rating.
    """

    devices: tuple[tuple[OnOffLoad, DeviceDynamics], ...]
    derating: tuple[float, float]
    exponent: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        solo, full = self.derating
        if not solo >= full > 0:
            raise ValueError("derating needs solo_kw >= full_kw > 0")

    @property
    def size(self) -> int:
        return len(self.devices)


def derated_unit_power(solo: float, full: float, n_on, n_devices: int, exponent: float = 1.0):
    n_on = np.asarray(n_on, dtype=float)
    if n_devices <= 1:
        return np.where(n_on > 0, solo, 0.0)
    frac = np.clip((n_on - 1.0) / (n_devices - 1.0), 0.0, 1.0) ** exponent
    return np.where(n_on > 0, solo - (solo - full) * frac, 0.0)


def aggregate_rack_power(group: RackGroup, on_count: int, per_device_levels: Sequence[float]) -> float:
    """Rack power with ``on_count`` devices on and the given risen levels (kW at nominal scale)."""
    if not 0 <= on_count <= group.size:
        raise ValueError(f"on_count must lie in [0, {group.size}]")
    if on_count == 0:
        return 0.0
    solo, full = group.derating
    unit = float(derated_unit_power(solo, full, on_count, group.size, group.exponent))
    levels = np.asarray(per_device_levels, dtype=float)
    noms = np.array([d.nominal_power for d, _ in group.devices])
    return float(np.sum(levels * unit / noms))


@dataclass
class GroupDevices:
    """Runtime arrays for one control group of devices.

    Device order: on/off devices (bank by bank) followed by continuous ones.
    ``bank`` maps each on/off device to its derating bank.
    """

    fleet: FleetSpec
    delay_steps: np.ndarray
    time_constant: np.ndarray
    bias: np.ndarray
    bank: np.ndarray
    bank_derating: list[tuple[float, float, int, float]]  # (solo, full, size, exponent)
    dt: float
    queue: np.ndarray = field(init=False)
    level: np.ndarray = field(init=False)
    head: int = field(init=False, default=0)
    frozen: bool = field(init=False, default=False)
    offline: bool = field(init=False, default=False)
    last_assignment: Assignment | None = field(init=False, default=None)
    last_command: float | None = field(init=False, default=None)
    cache: tuple | None = field(init=False, default=None)  # (lo, hi, command vector) for on/off-only groups

    def __post_init__(self):
        n = self.n_devices
        self.queue = np.zeros((int(self.delay_steps.max(initial=0)) + 1, n))
        self.level = np.zeros(n)
        self.nominal = np.array([d.nominal_power for d in self.fleet.on_off] + [0.0] * len(self.fleet.continuous))
        self.n_onoff = len(self.fleet.on_off)
        self.alpha = 1.0 - np.exp(-self.dt / self.time_constant)
        self._banks = [np.flatnonzero(self.bank == b) for b in range(len(self.bank_derating))]
        self._cols = np.arange(n)

    @property
    def n_devices(self) -> int:
        return len(self.fleet.on_off) + len(self.fleet.continuous)

    def command_vector(self, assignment: Assignment) -> np.ndarray:
        """Commanded kW per device (rating when on, setpoint for continuous)."""
        on = [d.nominal_power * assignment.statuses.get(d.id, 0) for d in self.fleet.on_off]
        cont = [assignment.setpoints.get(d.id, 0.0) for d in self.fleet.continuous]
        return np.array(on + cont, dtype=float)

    def prefill(self, command: np.ndarray) -> None:
        """Start in steady state at ``command``."""
        self.queue[:] = command
        self.level = self.bias * command

    def push(self, command: np.ndarray) -> None:
        self.head = (self.head + 1) % self.queue.shape[0]
        self.queue[self.head] = command

    def effective(self) -> np.ndarray:
        rows = (self.head - self.delay_steps) % self.queue.shape[0]
        return self.queue[rows, self._cols]

    def advance(self) -> float:
        """Move device levels one step toward their delayed commands; returns group power."""
        if self.offline:
            self.level[:] = 0.0
            return 0.0
        seen = self.effective()
        if not self.frozen:
            self.level += (self.bias * seen - self.level) * self.alpha
        return self.power(seen)

    def power(self, seen: np.ndarray) -> float:
        total = float(self.level[self.n_onoff:].sum())
        for b, idx in enumerate(self._banks):
            solo, full, size, expo = self.bank_derating[b]
            # units still spinning down after an off command count as running alone
            on = max(1, int(np.count_nonzero(seen[idx])))
            frac = ((on - 1) / (size - 1)) ** expo if size > 1 else 0.0
            total += float(self.level[idx].sum()) * (solo - (solo - full) * frac) / solo
        return total
