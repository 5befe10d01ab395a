"""Device scheduler: exact mixed-integer maximization of scheduled consumption under a cap.

    max   sum_i u_i f_i + sum_j v_j
    s.t.  q + sum_i u_i f_i + sum_j v_j <= P
          v_j^min <= v_j <= v_j^max,   u_i in {0, 1}

For a fixed on/off subset of weight W the best continuous top-up is
min(sum v^max, B - W) with B = P - q, so only the binary part needs a search.
Identical ratings are merged into classes and the search branches on the
number of devices switched on per class, largest rating first.

Objectives are evaluated with ``math.fsum`` so they depend only on the
multiset of chosen ratings, never on summation order.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

__all__ = [
    "OnOffLoad",
    "ContinuousLoad",
    "FleetSpec",
    "Assignment",
    "InfeasibleSchedule",
    "schedule",
    "brute_force_schedule",
    "group_schedules",
    "FEAS_TOL",
]

FEAS_TOL = 1e-9
BRUTE_FORCE_LIMIT = 20


@dataclass(frozen=True)
class OnOffLoad:
    id: str
    nominal_power: float

    def __post_init__(self):
        if not (self.nominal_power > 0 and math.isfinite(self.nominal_power)):
            raise ValueError(f"load {self.id!r}: nominal power must be > 0")


@dataclass(frozen=True)
class ContinuousLoad:
    id: str
    v_min: float
    v_max: float

    def __post_init__(self):
        if not (0.0 <= self.v_min <= self.v_max and math.isfinite(self.v_max)):
            raise ValueError(f"load {self.id!r}: need 0 <= v_min <= v_max")


@dataclass(frozen=True)
class FleetSpec:
    on_off: tuple[OnOffLoad, ...] = ()
    continuous: tuple[ContinuousLoad, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "on_off", tuple(self.on_off))
        object.__setattr__(self, "continuous", tuple(self.continuous))
        ids = [d.id for d in self.on_off] + [d.id for d in self.continuous]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate load ids: {dupes}")

    @property
    def capacity(self) -> float:
        return math.fsum([d.nominal_power for d in self.on_off] + [d.v_max for d in self.continuous])

    @property
    def min_power(self) -> float:
        return math.fsum(d.v_min for d in self.continuous)

    def __add__(self, other: "FleetSpec") -> "FleetSpec":
        return FleetSpec(self.on_off + other.on_off, self.continuous + other.continuous)

    @classmethod
    def from_dict(cls, data: Mapping) -> "FleetSpec":
        try:
            on_off = [OnOffLoad(str(d["id"]), float(d["kw"])) for d in data.get("on_off", [])]
            cont = [ContinuousLoad(str(d["id"]), float(d["kw_min"]), float(d["kw_max"]))
                    for d in data.get("continuous", [])]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed fleet description: {exc}") from exc
        return cls(tuple(on_off), tuple(cont))

    def to_dict(self) -> dict:
        return {
            "on_off": [{"id": d.id, "kw": d.nominal_power} for d in self.on_off],
            "continuous": [{"id": d.id, "kw_min": d.v_min, "kw_max": d.v_max} for d in self.continuous],
        }

    @classmethod
    def load(cls, path) -> "FleetSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Assignment:
    statuses: dict[str, int]
    setpoints: dict[str, float]
    total_power: float
    objective: float
    optimal: bool = True
    gap: float = 0.0  # budget left unused, (P - q) - total_power

    def power_of(self, fleet: FleetSpec) -> float:
        on = [d.nominal_power for d in fleet.on_off if self.statuses.get(d.id)]
        return math.fsum(on + [self.setpoints.get(d.id, 0.0) for d in fleet.continuous])

    def to_dict(self) -> dict:
        return {
            "statuses": dict(self.statuses),
            "setpoints": dict(self.setpoints),
            "total_power": self.total_power,
            "objective": self.objective,
            "optimal": self.optimal,
            "gap": self.gap,
        }


class InfeasibleSchedule(ValueError):
    """Minimum continuous consumption exceeds the available budget."""

    def __init__(self, deficit: float, budget: float):
        self.deficit = deficit
        self.budget = budget
        super().__init__(f"infeasible schedule: minimum continuous load exceeds budget {budget:.6g} kW "
                         f"by {deficit:.6g} kW")


@dataclass
class _Problem:
    budget: float
    vmin: float
    vmax: float
    ratings: list[float]  # class ratings, descending
    counts: list[int]
    prev_on: list[int] | None
    mid: float = field(init=False)

    def __post_init__(self):
        self.mid = self.vmin + 0.5 * (self.vmax - self.vmin)

    def feasible(self, w: float) -> bool:
        return math.fsum((w, self.vmin)) <= self.budget + FEAS_TOL

    def objective(self, w: float) -> float:
        if math.fsum((w, self.vmax)) >= self.budget:
            return self.budget
        return math.fsum((w, self.vmax))

    def fill(self, w: float) -> float:
        return min(self.vmax, max(self.vmin, self.budget - w))

    def cost(self, ks: Sequence[int], w: float) -> float:
        """Tie-break among optimal choices (lower is better)."""
        if self.prev_on is not None:
            return float(sum(abs(k - m) for k, m in zip(ks, self.prev_on)))
        return abs(self.fill(w) - self.mid)

    def weight(self, ks: Sequence[int]) -> float:
        return math.fsum(itertools.chain.from_iterable([r] * k for r, k in zip(self.ratings, ks)))


def _prepare(fleet: FleetSpec, target: float, uncontrollable: float, previous: Assignment | None):
    if not (math.isfinite(target) and math.isfinite(uncontrollable)):
        raise ValueError("target and uncontrollable load must be finite")
    budget = target - uncontrollable
    vmin = fleet.min_power
    vmax = math.fsum(d.v_max for d in fleet.continuous)
    if vmin > budget + FEAS_TOL:
        raise InfeasibleSchedule(vmin - budget, budget)
    by_rating: dict[float, list[OnOffLoad]] = {}
    for d in fleet.on_off:
        by_rating.setdefault(d.nominal_power, []).append(d)
    ratings = sorted(by_rating, reverse=True)
    members = [by_rating[r] for r in ratings]
    prev_on = None
    if previous is not None:
        prev_on = [sum(1 for d in ms if previous.statuses.get(d.id)) for ms in members]
    prob = _Problem(budget, vmin, vmax, ratings, [len(m) for m in members], prev_on)
    return prob, members


def _assemble(fleet: FleetSpec, prob: _Problem, members, ks, previous, optimal: bool) -> Assignment:
    statuses = {d.id: 0 for d in fleet.on_off}
    for ms, k in zip(members, ks):
        if previous is not None:
            ordered = sorted(ms, key=lambda d: 0 if previous.statuses.get(d.id) else 1)
        else:
            ordered = ms
        for d in ordered[:k]:
            statuses[d.id] = 1
    w = prob.weight(ks)
    objective = prob.objective(w)
    setpoints = {}
    span = prob.vmax - prob.vmin
    frac = 0.0 if span <= 0 else min(1.0, max(0.0, (prob.fill(w) - prob.vmin) / span))
    for d in fleet.continuous:
        setpoints[d.id] = d.v_min + frac * (d.v_max - d.v_min)
    total = math.fsum([w] + list(setpoints.values()))
    return Assignment(statuses, setpoints, total, objective, optimal, prob.budget - total)


def schedule(
    fleet: FleetSpec,
    target: float,
    uncontrollable: float = 0.0,
    previous: Assignment | None = None,
) -> Assignment:
    """Provably optimal assignment for the cap ``target`` given uncontrollable load.

    Among optimal assignments the one closest to ``previous`` (fewest on/off
    switches) is returned; without ``previous`` the one leaving the
    continuous loads nearest mid-range is preferred.

    Raises :class:`InfeasibleSchedule` when the continuous minimum exceeds
    the budget.
    """
    prob, members = _prepare(fleet, target, uncontrollable, previous)
    ratings, counts = prob.ratings, prob.counts
    nc = len(ratings)
    suffix = [0.0] * (nc + 1)
    for c in range(nc - 1, -1, -1):
        suffix[c] = suffix[c + 1] + ratings[c] * counts[c]
    slack = 1e-9 * (1.0 + abs(prob.budget) + suffix[0])
    best = {"obj": -math.inf, "cost": math.inf, "ks": None}
    ks = [0] * nc

    def cost_bound(c: int, w: float, partial: float) -> float:
        if prob.prev_on is not None:
            return partial
        lo = min(prob.vmax, max(prob.vmin, prob.budget - w - suffix[c]))
        hi = min(prob.vmax, max(prob.vmin, prob.budget - w))
        if lo <= prob.mid <= hi:
            return 0.0
        return min(abs(lo - prob.mid), abs(hi - prob.mid))

    def dfs(c: int, w: float, partial: float) -> bool:
        if c == nc:
            wx = prob.weight(ks)
            if not prob.feasible(wx):
                return False
            obj = prob.objective(wx)
            cost = prob.cost(ks, wx)
            if obj > best["obj"] or (obj == best["obj"] and cost < best["cost"]):
                best.update(obj=obj, cost=cost, ks=list(ks))
            return best["obj"] == prob.budget and best["cost"] == 0.0
        ub = min(prob.budget, w + suffix[c] + prob.vmax)
        if ub + slack < best["obj"]:
            return False
        if ub <= best["obj"] + slack and best["obj"] == prob.budget and cost_bound(c, w, partial) >= best["cost"]:
            return False
        r = ratings[c]
        room = prob.budget - prob.vmin - w + slack
        kmax = min(counts[c], int(math.floor(room / r)) if room > 0 else 0)
        for k in range(kmax, -1, -1):
            ks[c] = k
            extra = abs(k - prob.prev_on[c]) if prob.prev_on is not None else 0.0
            if dfs(c + 1, w + k * r, partial + extra):
                return True
        ks[c] = 0
        return False

    dfs(0, 0.0, 0.0)
    return _assemble(fleet, prob, members, best["ks"], previous, True)


def brute_force_schedule(fleet: FleetSpec, target: float, uncontrollable: float = 0.0,
                         previous: Assignment | None = None) -> Assignment:
    """Exhaustive enumeration over every on/off subset; the oracle for :func:`schedule`."""
    if len(fleet.on_off) > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} on/off loads, got {len(fleet.on_off)}")
    prob, members = _prepare(fleet, target, uncontrollable, previous)
    index = {r: c for c, r in enumerate(prob.ratings)}
    cls_of = [index[d.nominal_power] for d in fleet.on_off]
    best_obj, best_cost, best_ks = -math.inf, math.inf, None
    for bits in itertools.product((0, 1), repeat=len(fleet.on_off)):
        w = math.fsum(d.nominal_power for d, b in zip(fleet.on_off, bits) if b)
        if not prob.feasible(w):
            continue
        ks = [0] * len(prob.ratings)
        for c, b in zip(cls_of, bits):
            ks[c] += b
        obj, cost = prob.objective(w), prob.cost(ks, w)
        if obj > best_obj or (obj == best_obj and cost < best_cost):
            best_obj, best_cost, best_ks = obj, cost, ks
    return _assemble(fleet, prob, members, best_ks, previous, True)


def group_schedules(
    partition: Sequence[FleetSpec],
    group_targets: Sequence[float],
    uncontrollable: Sequence[float] | None = None,
    previous: Sequence[Assignment | None] | None = None,
) -> list[Assignment | InfeasibleSchedule]:
    """Independent :func:`schedule` per group.

    An infeasible group yields its :class:`InfeasibleSchedule` in place of an
    assignment; the other groups are unaffected.
    """
    ids = [d.id for f in partition for d in f.on_off + f.continuous]
    if len(set(ids)) != len(ids):
        raise ValueError("fleet partition overlaps")
    n = len(partition)
    if len(group_targets) != n:
        raise ValueError("one target per group required")
    qs = [0.0] * n if uncontrollable is None else list(uncontrollable)
    prev = [None] * n if previous is None else list(previous)
    out: list[Assignment | InfeasibleSchedule] = []
    for fleet, target, q, p in zip(partition, group_targets, qs, prev):
        try:
            out.append(schedule(fleet, target, q, p))
        except InfeasibleSchedule as exc:
            out.append(exc)
    return out
