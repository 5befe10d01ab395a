"""Plants, controllers and closed-loop delay systems.

Every loop is assembled as a linear system with discrete delays

    x'(t) = A0 x(t) + sum_i A_i x(t - tau_i) + b0 u(t) + sum_i b_i u(t - tau_i)
    y(t)  = c x(t)

Delays sit on the plant input of each group, so the delayed terms carry the
controller output channel. The homogeneous part (A0, A_i) is what the
spectral stability analysis consumes; the input/output vectors are used for
step responses and frequency responses.

Units: power in kW, time in seconds, frequency in rad/s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "FirstOrderPlant",
    "PIParams",
    "FFPIParams",
    "GroupModel",
    "TwoLevelModel",
    "DelayTerm",
    "DelaySystem",
    "assemble_inner_loop",
    "assemble_open_loop",
    "assemble_full_system",
    "open_loop_frequency_response",
    "inner_loop_frequency_response",
]


def _finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class FirstOrderPlant:
    """G(s) = gain / (time_constant*s + 1)."""

    gain: float
    time_constant: float

    def __post_init__(self):
        _finite("plant parameters", self.gain, self.time_constant)
        if self.time_constant <= 0:
            raise ValueError("time_constant must be > 0")
        if self.gain == 0:
            raise ValueError("plant gain must be nonzero")

    def response(self, s: complex | np.ndarray) -> complex | np.ndarray:
        return self.gain / (s * self.time_constant + 1.0)


@dataclass(frozen=True)
class PIParams:
    kp: float
    ki: float

    def __post_init__(self):
        _finite("PI gains", self.kp, self.ki)
        if self.kp < 0 or self.ki < 0:
            raise ValueError("PI gains must be nonnegative")

    def response(self, s):
        return self.kp + self.ki / s


@dataclass(frozen=True)
class FFPIParams:
    """PI feedback plus a reference lead filter (s*t_ff + 1) / (h_nom*(s*t_filter + 1)).

    ``t_filter`` defaults to ``t_ff / 10``. With ``t_ff == 0`` the feed-forward
    path degenerates to a first-order low-pass of gain ``1/h_nom``.
    """

    pi: PIParams
    t_ff: float
    h_nom: float
    t_filter: float | None = None

    def __post_init__(self):
        if self.t_filter is None:
            object.__setattr__(self, "t_filter", self.t_ff / 10.0 if self.t_ff > 0 else 0.01)
        _finite("feed-forward parameters", self.t_ff, self.h_nom, self.t_filter)
        if self.t_ff < 0:
            raise ValueError("t_ff must be >= 0")
        if self.h_nom == 0:
            raise ValueError("h_nom must be nonzero")
        if self.t_filter <= 0:
            raise ValueError("t_filter must be > 0")
        if self.t_ff > 0 and self.t_filter > self.t_ff:
            raise ValueError("t_filter must not exceed t_ff")

    @property
    def kp(self) -> float:
        return self.pi.kp

    @property
    def ki(self) -> float:
        return self.pi.ki

    def ff_response(self, s):
        return (s * self.t_ff + 1.0) / (self.h_nom * (s * self.t_filter + 1.0))

    def response(self, s):
        return self.pi.response(s)


@dataclass(frozen=True)
class GroupModel:
    """One inner loop: a device group, its closed-loop delay and its controller.

    ``controller`` may be a plain :class:`PIParams` for a classical loop
    (two states) or :class:`FFPIParams` (three states).
    """

    name: str
    plant: FirstOrderPlant
    delay: float
    controller: FFPIParams | PIParams
    participation: float = 1.0

    def __post_init__(self):
        _finite("group delay/participation", self.delay, self.participation)
        if self.delay < 0:
            raise ValueError(f"group {self.name!r}: delay must be >= 0")
        if not 0.0 <= self.participation <= 1.0:
            raise ValueError(f"group {self.name!r}: participation must lie in [0, 1]")

    @property
    def n_states(self) -> int:
        return 3 if isinstance(self.controller, FFPIParams) else 2

    def with_(self, **changes) -> "GroupModel":
        return replace(self, **changes)


@dataclass(frozen=True)
class TwoLevelModel:
    groups: tuple[GroupModel, ...]
    outer: PIParams

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.groups:
            raise ValueError("a two-level model needs at least one group")
        total = math.fsum(g.participation for g in self.groups)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"participation factors must sum to 1, got {total:.12g}")

    @property
    def dim(self) -> int:
        return sum(g.n_states for g in self.groups) + 1

    def with_common_delay(self, tau: float) -> "TwoLevelModel":
        return TwoLevelModel(tuple(g.with_(delay=tau) for g in self.groups), self.outer)

    def with_outer(self, outer: PIParams) -> "TwoLevelModel":
        return TwoLevelModel(self.groups, outer)


@dataclass(frozen=True)
class DelayTerm:
    tau: float
    a: np.ndarray
    b: np.ndarray | None = None


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class DelaySystem:
    """Linear system with discrete constant delays, optionally with one input and one output.

    Construct through :meth:`build`, which merges zero delays into ``a0`` and
    sums terms that share a delay value.
    """

    a0: np.ndarray
    terms: tuple[DelayTerm, ...] = ()
    b0: np.ndarray | None = None
    c: np.ndarray | None = None

    @classmethod
    def build(cls, a0, terms: Sequence = (), b0=None, c=None) -> "DelaySystem":
        a0 = np.array(a0, dtype=float, ndmin=2)
        n = a0.shape[0]
        if a0.shape != (n, n):
            raise ValueError("a0 must be square")
        has_io = b0 is not None
        b0 = np.zeros(n) if b0 is None else np.array(b0, dtype=float).reshape(n)
        merged: dict[float, list[np.ndarray]] = {}
        for term in terms:
            if isinstance(term, DelayTerm):
                tau, a, b = term.tau, term.a, term.b
            elif len(term) == 2:
                (a, tau), b = term, None
            else:
                a, tau, b = term
            tau = float(tau)
            a = np.array(a, dtype=float, ndmin=2)
            if a.shape != (n, n):
                raise ValueError("delay matrices must match a0")
            b = np.zeros(n) if b is None else np.array(b, dtype=float).reshape(n)
            if b.any():
                has_io = True
            if not math.isfinite(tau) or tau < 0:
                raise ValueError(f"delays must be finite and >= 0, got {tau}")
            if tau == 0.0:
                a0 = a0 + a
                b0 = b0 + b
                continue
            if tau in merged:
                merged[tau][0] = merged[tau][0] + a
                merged[tau][1] = merged[tau][1] + b
            else:
                merged[tau] = [a, b]
        if not np.all(np.isfinite(a0)):
            raise ValueError("system matrices must be finite")
        out_terms = []
        for tau in sorted(merged):
            a, b = merged[tau]
            if not np.all(np.isfinite(a)):
                raise ValueError("system matrices must be finite")
            out_terms.append(DelayTerm(tau, _frozen(a), _frozen(b) if has_io else None))
        if c is not None:
            c = _frozen(np.array(c, dtype=float).reshape(n))
        return cls(_frozen(a0), tuple(out_terms), _frozen(b0) if has_io else None, c)

    @property
    def dim(self) -> int:
        return self.a0.shape[0]

    @property
    def taus(self) -> tuple[float, ...]:
        return tuple(t.tau for t in self.terms)

    @property
    def tau_max(self) -> float:
        return max(self.taus, default=0.0)

    @property
    def has_io(self) -> bool:
        return self.b0 is not None and self.c is not None

    def delay_free(self) -> np.ndarray:
        """A0 + sum A_i: the matrix obtained by setting every delay to zero."""
        return self.a0 + sum((t.a for t in self.terms), np.zeros_like(self.a0))

    def matrix_norm_sum(self) -> float:
        return float(np.linalg.norm(self.a0, 2) + sum(np.linalg.norm(t.a, 2) for t in self.terms))

    def char_matrix(self, lam: complex) -> np.ndarray:
        """lambda*I - A0 - sum A_i exp(-lambda*tau_i)."""
        m = lam * np.eye(self.dim, dtype=complex) - self.a0
        for t in self.terms:
            m = m - t.a * np.exp(-lam * t.tau)
        return m

    def char_matrix_derivative(self, lam: complex) -> np.ndarray:
        d = np.eye(self.dim, dtype=complex)
        for t in self.terms:
            d = d + t.a * (t.tau * np.exp(-lam * t.tau))
        return d

    def freqresp(self, omega) -> np.ndarray:
        """c (jwI - A0 - sum A_i e^{-jw tau_i})^{-1} (b0 + sum b_i e^{-jw tau_i})."""
        if not self.has_io:
            raise ValueError("frequency response needs input and output vectors")
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        out = np.empty(omega.shape, dtype=complex)
        for k, w in enumerate(omega):
            s = 1j * w
            rhs = self.b0.astype(complex)
            for t in self.terms:
                rhs = rhs + t.b * np.exp(-s * t.tau)
            out[k] = self.c @ np.linalg.solve(self.char_matrix(s), rhs)
        return out

    def dc_gain(self) -> float:
        """Steady-state output per unit constant input, -c (A0 + sum A_i)^{-1} (b0 + sum b_i)."""
        if not self.has_io:
            raise ValueError("dc gain needs input and output vectors")
        b = self.b0 + sum((t.b for t in self.terms), np.zeros(self.dim))
        return float(-self.c @ np.linalg.solve(self.delay_free(), b))

    def feedback(self) -> "DelaySystem":
        """Close a unit negative feedback from the output back to the input."""
        if not self.has_io:
            raise ValueError("feedback needs input and output vectors")
        a0 = self.a0 - np.outer(self.b0, self.c)
        terms = [DelayTerm(t.tau, t.a - np.outer(t.b, self.c), t.b) for t in self.terms]
        return DelaySystem.build(a0, terms, self.b0, self.c)

    def with_delays(self, taus: Sequence[float]) -> "DelaySystem":
        if len(taus) != len(self.terms):
            raise ValueError("one delay per term required")
        terms = [DelayTerm(tau, t.a, t.b) for tau, t in zip(taus, self.terms)]
        return DelaySystem.build(self.a0, terms, self.b0, self.c)


@dataclass
class _Builder:
    """Accumulates rows of a delay system over the vector [x; u]."""

    n: int
    a0: np.ndarray = field(init=False)
    b0: np.ndarray = field(init=False)
    delayed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.a0 = np.zeros((self.n, self.n))
        self.b0 = np.zeros(self.n)

    def add(self, row: int, expr: np.ndarray, tau: float = 0.0) -> None:
        """Add expr . [x; u] (evaluated at t - tau) to the derivative of state ``row``."""
        if tau == 0.0:
            self.a0[row] += expr[:-1]
            self.b0[row] += expr[-1]
            return
        a, b = self.delayed.setdefault(tau, (np.zeros((self.n, self.n)), np.zeros(self.n)))
        a[row] += expr[:-1]
        b[row] += expr[-1]

    def system(self, c: np.ndarray) -> DelaySystem:
        terms = [DelayTerm(tau, a, b) for tau, (a, b) in self.delayed.items()]
        return DelaySystem.build(self.a0, terms, self.b0, c)


def _add_group(bld: _Builder, g: GroupModel, offset: int, ref: np.ndarray) -> np.ndarray:
    """Wire one inner loop at state ``offset`` with reference ``ref`` (a row over [x; u]).

    States: p (plant output), z (PI integrator) and, for FF-PI, q (lead-filter
    low-pass state). Returns the expression of the plant output p.
    """
    size = bld.n + 1
    p = np.zeros(size)
    p[offset] = 1.0
    z = np.zeros(size)
    z[offset + 1] = 1.0
    ctrl = g.controller
    pi = ctrl.pi if isinstance(ctrl, FFPIParams) else ctrl
    err = ref - p
    u = pi.kp * err + z
    if isinstance(ctrl, FFPIParams):
        q = np.zeros(size)
        q[offset + 2] = 1.0
        lead = ctrl.t_ff / ctrl.t_filter
        u = u + (lead * ref + (1.0 - lead) * q) / ctrl.h_nom
        bld.add(offset + 2, (ref - q) / ctrl.t_filter)
    bld.add(offset + 1, pi.ki * err)
    T, h = g.plant.time_constant, g.plant.gain
    bld.add(offset, -p / T)
    bld.add(offset, (h / T) * u, g.delay)
    return p


def assemble_inner_loop(group: GroupModel) -> DelaySystem:
    """Closed inner loop r -> p of one group (states p, z[, q])."""
    bld = _Builder(group.n_states)
    ref = np.zeros(group.n_states + 1)
    ref[-1] = 1.0
    p = _add_group(bld, group, 0, ref)
    return bld.system(p[:-1])


def assemble_open_loop(model: TwoLevelModel) -> DelaySystem:
    """Loop broken at the building error: input err_P, output obs_P = sum of group powers.

    The outer PI integrator is the last state; each group receives
    r_i = alpha_i * (kp*err + z0).
    """
    n = model.dim
    bld = _Builder(n)
    z0 = np.zeros(n + 1)
    z0[n - 1] = 1.0
    err = np.zeros(n + 1)
    err[-1] = 1.0
    delta = model.outer.kp * err + z0
    bld.add(n - 1, model.outer.ki * err)
    obs = np.zeros(n + 1)
    offset = 0
    for g in model.groups:
        obs = obs + _add_group(bld, g, offset, g.participation * delta)
        offset += g.n_states
    return bld.system(obs[:-1])


def assemble_full_system(model: TwoLevelModel) -> DelaySystem:
    """Complete two-level closed loop: input tgt_P, output obs_P."""
    return assemble_open_loop(model).feedback()


def inner_loop_frequency_response(group: GroupModel, omega) -> np.ndarray:
    """H(jw) of the inner loop r -> p, evaluated from its block diagram."""
    s = 1j * np.asarray(omega, dtype=float)
    plant = group.plant.response(s) * np.exp(-s * group.delay)
    ctrl = group.controller
    fb = ctrl.response(s)
    ff = ctrl.ff_response(s) if isinstance(ctrl, FFPIParams) else 0.0
    return plant * (fb + ff) / (1.0 + fb * plant)


def open_loop_frequency_response(model: TwoLevelModel, omega) -> np.ndarray:
    """L(jw) = C_outer(jw) * sum_i alpha_i H_i(jw), from tgt_P to obs_P."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if np.any(omega <= 0):
        raise ValueError("frequencies must be > 0 (integrator pole at the origin)")
    total = np.zeros(omega.shape, dtype=complex)
    for g in model.groups:
        total += g.participation * inner_loop_frequency_response(g, omega)
    return model.outer.response(1j * omega) * total
