"""Performance metrics, Monte Carlo robustness and Bode margins."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import DelaySystem, TwoLevelModel, assemble_full_system, open_loop_frequency_response
from .stability import DEFAULT_N, stability_index
from .testbed.dde import DDETrace, simulate_dde

__all__ = [
    "h2_metric",
    "step_h2",
    "ResponseMetrics",
    "response_metrics",
    "scenario_metrics",
    "MonteCarloSummary",
    "monte_carlo",
    "perturb_model",
    "MarginReport",
    "margins_from_response",
    "bode_margins",
    "margin_sweep",
    "write_margin_csv",
    "write_monte_carlo_csv",
    "json_number",
]

T_M = 100.0
INITIAL_FRACTION = 0.02
BAND_FRACTION = 0.05
SUSTAIN_S = 2.0
PRE_WINDOW_S = 5.0
SS_FRACTION = 0.2


def json_number(x: float):
    """Finite floats pass through; infinities become the strings "inf"/"-inf", NaN becomes None."""
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _series(trace, target):
    if isinstance(trace, DDETrace):
        if trace.y is None:
            raise ValueError("DDE trace has no output row; pass a system with an output vector")
        t, y = trace.t, trace.y
    elif hasattr(trace, "obs"):
        t, y = trace.t, trace.obs
        if target is None:
            target = trace.target
    else:
        t, y = (np.asarray(a, dtype=float) for a in trace)
    if target is None:
        raise ValueError("target value required")
    return np.asarray(t, dtype=float), np.asarray(y, dtype=float), target


def h2_metric(trace, target: float | np.ndarray | None = None, t_m: float = T_M, t0: float = 0.0) -> float:
    """Trapezoidal integral of (y - target)^2 over [t0, t0 + t_m].

    ``trace`` is a DDE trace, a simulation trace (target defaults to its
    recorded target) or a ``(t, y)`` pair.
    """
    t, y, target = _series(trace, target)
    if t_m <= 0:
        raise ValueError("t_m must be > 0")
    t1 = t0 + t_m
    if t[0] > t0 + 1e-9 or t[-1] < t1 - 1e-9 * max(1.0, t1):
        raise ValueError(f"trace covers [{t[0]:g}, {t[-1]:g}] s, need [{t0:g}, {t1:g}] s")
    err2 = (y - target) ** 2
    mask = (t >= t0 - 1e-12) & (t <= t1 + 1e-9 * max(1.0, t1))
    tt, ee = t[mask], err2[mask]
    if not np.all(np.isfinite(ee)):
        return math.inf
    return float(np.trapezoid(ee, tt))


def step_h2(sys: DelaySystem, t_m: float = T_M, dt: float | None = None) -> float:
    """H2 of the unit-step response of a closed loop with unit reference; +inf if it diverges."""
    trace = simulate_dde(sys, 0.0, t_m, dt, u=1.0)
    if trace.diverged or not np.all(np.isfinite(trace.y)):
        return math.inf
    return h2_metric(trace, 1.0, t_m)


@dataclass(frozen=True)
class ResponseMetrics:
    initial_response: float
    ramp_time: float
    h2: float
    ss_error: float
    ss_oscillation: float
    step_time: float | None = None

    def to_dict(self) -> dict:
        out = {
            "initial_response_s": json_number(self.initial_response),
            "ramp_time_s": json_number(self.ramp_time),
            "h2": json_number(self.h2),
            "ss_error_kw": json_number(self.ss_error),
            "ss_osc_kw": json_number(self.ss_oscillation),
        }
        if self.step_time is not None:
            out["step_time_s"] = self.step_time
        return out


def response_metrics(trace, step: tuple[float, float, float], hold_end: float | None = None,
                     t_m: float = T_M) -> ResponseMetrics:
    """Metrics of the response to one target step ``(time, before, after)``.

    The hold lasts until ``hold_end`` (default: end of the trace). Reference
    level before the step is the mean output over the preceding 5 s.
    """
    t, y, _ = _series(trace, 0.0)
    t_step, before, after = step
    delta = after - before
    if delta == 0:
        raise ValueError("step has zero magnitude")
    k0 = int(np.searchsorted(t, t_step - 1e-9))
    if k0 >= t.size or abs(t[k0] - t_step) > 0.5 * (t[1] - t[0]):
        raise ValueError(f"step at {t_step} s not found in trace")
    end = t[-1] if hold_end is None else min(hold_end, t[-1])
    k1 = int(np.searchsorted(t, end - 1e-9))
    if t[k1] - t_step <= 0:
        raise ValueError("no hold period after the step")
    dt = t[1] - t[0]

    pre = (t >= t_step - PRE_WINDOW_S) & (t < t_step)
    y_pre = float(np.mean(y[pre])) if pre.any() else float(y[k0])
    sign = 1.0 if delta > 0 else -1.0
    seg_t, seg_y = t[k0:k1 + 1], y[k0:k1 + 1]

    moved = np.flatnonzero(sign * (seg_y - y_pre) > INITIAL_FRACTION * abs(delta))
    initial = float(seg_t[moved[0]] - t_step) if moved.size else math.inf

    inside = np.abs(seg_y - after) <= BAND_FRACTION * abs(delta)
    need = int(math.ceil(SUSTAIN_S / dt - 1e-9))
    ramp = math.inf
    run = 0
    for i in range(inside.size):
        run = run + 1 if inside[i] else 0
        if run > need:
            ramp = float(seg_t[i - run + 1] - t_step)
            break
    if initial == math.inf and ramp < math.inf:
        initial = ramp

    span = min(t_m, seg_t[-1] - t_step)
    h2 = h2_metric((t, y), after, span, t_step)

    w0 = t[k1] - SS_FRACTION * (t[k1] - t_step)
    win = (t >= w0 - 1e-9) & (t < t[k1] - 1e-9)
    err = y[win] - after
    return ResponseMetrics(initial, ramp, h2, float(np.mean(np.abs(err))), float(np.ptp(err)), float(t_step))


def scenario_metrics(trace, events: Sequence[tuple[float, float, float]]) -> tuple[ResponseMetrics, list[ResponseMetrics]]:
    """Per-step metrics and their worst case (max of each field) over all steps."""
    if not events:
        raise ValueError("the target profile has no step inside the simulated window")
    per = []
    for k, ev in enumerate(events):
        end = events[k + 1][0] if k + 1 < len(events) else None
        per.append(response_metrics(trace, ev, end))
    worst = ResponseMetrics(
        max(m.initial_response for m in per),
        max(m.ramp_time for m in per),
        max(m.h2 for m in per),
        max(m.ss_error for m in per),
        max(m.ss_oscillation for m in per),
    )
    return worst, per


# ---------------------------------------------------------------- Monte Carlo

UNCERTAINTIES = ("gain", "delay")


def perturb_model(model: TwoLevelModel, uncertainty: str, factors: Sequence[float]) -> TwoLevelModel:
    """Scale each group's true plant gain or its delay.

    Gain perturbations leave the controllers' nominal gain untouched, so they
    act as characterization errors.
    """
    if uncertainty not in UNCERTAINTIES:
        raise ValueError(f"uncertainty must be one of {UNCERTAINTIES}")
    groups = []
    for g, f in zip(model.groups, factors, strict=True):
        if uncertainty == "gain":
            groups.append(g.with_(plant=type(g.plant)(g.plant.gain * f, g.plant.time_constant)))
        else:
            groups.append(g.with_(delay=g.delay * f))
    return TwoLevelModel(tuple(groups), model.outer)


@dataclass(frozen=True, eq=False)
class MonteCarloSummary:
    uncertainty: str
    pct: float
    seed: int
    group_names: tuple[str, ...]
    factors: np.ndarray  # (n, groups)
    index: np.ndarray
    h2: np.ndarray
    errors: tuple[str | None, ...] = field(default=())

    @property
    def n_samples(self) -> int:
        return int(self.index.size)

    @property
    def stable_fraction(self) -> float:
        return float(np.mean(self.index < 0)) if self.n_samples else 0.0

    def stats(self) -> dict:
        out = {}
        for name, arr in (("index", self.index), ("h2", self.h2)):
            ok = arr[np.isfinite(arr)]
            out[name] = {
                "min": json_number(ok.min()) if ok.size else None,
                "max": json_number(ok.max()) if ok.size else None,
                "mean": json_number(math.fsum(ok) / ok.size) if ok.size else None,
            }
        return out

    def to_dict(self) -> dict:
        return {
            "uncertainty": self.uncertainty,
            "pct": self.pct,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "stable_fraction": self.stable_fraction,
            "failures": sum(e is not None for e in self.errors),
            "stats": self.stats(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mc_sample(model: TwoLevelModel, uncertainty: str, factors, N: int, t_m: float,
               evaluate: Callable | None) -> tuple[float, float, str | None]:
    try:
        m = perturb_model(model, uncertainty, factors)
        sys = assemble_full_system(m)
        idx = stability_index(sys, N).index
        h2 = evaluate(m, factors) if evaluate is not None else step_h2(sys, t_m)
        return float(idx), float(h2), None
    except Exception as exc:  # recorded per sample, never fatal
        return math.nan, math.nan, f"{type(exc).__name__}: {exc}"


def monte_carlo(
    model: TwoLevelModel,
    uncertainty: str = "gain",
    pct: float = 0.2,
    n: int = 1000,
    seed: int = 0,
    *,
    N: int = DEFAULT_N,
    t_m: float = T_M,
    jobs: int = 1,
    evaluate: Callable[[TwoLevelModel, np.ndarray], float] | None = None,
) -> MonteCarloSummary:
    """Draw each group's gain (or delay) uniformly in [1 - pct, 1 + pct] times nominal.

    All factors are drawn up front, so results do not depend on ``jobs``.
    ``evaluate`` replaces the linear-model H2 (e.g. with a device-level run).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= pct <= 0.5:
        raise ValueError("pct must lie in [0, 0.5]")
    if uncertainty not in UNCERTAINTIES:
        raise ValueError(f"uncertainty must be one of {UNCERTAINTIES}")
    rng = np.random.default_rng(seed)
    factors = rng.uniform(1.0 - pct, 1.0 + pct, size=(n, len(model.groups)))
    work = lambda f: _mc_sample(model, uncertainty, f, N, t_m, evaluate)
    if jobs == 1:
        results = [work(f) for f in factors]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, factors))
    idx = np.array([r[0] for r in results])
    h2 = np.array([r[1] for r in results])
    return MonteCarloSummary(uncertainty, float(pct), int(seed), tuple(g.name for g in model.groups),
                             factors, idx, h2, tuple(r[2] for r in results))


def _fmt(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6f}"


def write_monte_carlo_csv(summary: MonteCarloSummary, path: str | Path) -> Path:
    path = Path(path)
    cols = ["sample"] + [f"{summary.uncertainty}_{g}" for g in summary.group_names] + ["index", "h2"]
    with path.open("w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(summary.n_samples):
            row = [str(k)] + [_fmt(v) for v in summary.factors[k]] + [_fmt(summary.index[k]), _fmt(summary.h2[k])]
            fh.write(",".join(row) + "\n")
    return path


# ---------------------------------------------------------------- Bode margins

W_MIN, W_MAX, W_POINTS, W_TOL = 1e-4, 1e2, 2000, 1e-6


@dataclass(frozen=True)
class MarginReport:
    """Gain margin as a ratio (> 1 means room to spare), phase margin in degrees."""

    gain_margin: float
    phase_margin: float
    gain_crossover: float
    phase_crossover: float

    @property
    def gain_margin_db(self) -> float:
        return 20.0 * math.log10(self.gain_margin) if self.gain_margin > 0 else -math.inf

    @property
    def positive(self) -> bool:
        return self.gain_margin > 1.0 and self.phase_margin > 0.0


def _bisect(f, a: float, b: float, fa: float, tol: float) -> float:
    while b - a > tol:
        m = 0.5 * (a + b)
        fm = f(m)
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def margins_from_response(L: Callable[[np.ndarray], np.ndarray], w_min: float = W_MIN, w_max: float = W_MAX,
                          n: int = W_POINTS, tol: float = W_TOL) -> MarginReport:
    """Classical margins of an open loop under unit negative feedback.

    Phase is unwrapped from the low end of the grid. Gain crossover is the
    first frequency where |L| falls through 1, phase crossover the first where
    the phase falls through -180 degrees; both are refined by bisection.
    """
    w = np.logspace(math.log10(w_min), math.log10(w_max), n)
    resp = np.asarray(L(w), dtype=complex)
    mag = np.abs(resp)
    phase = np.unwrap(np.angle(resp))

    def phase_at(x: float, near: float) -> float:
        p = float(np.angle(np.asarray(L(np.array([x])))[0]))
        return p + 2.0 * math.pi * round((near - p) / (2.0 * math.pi))

    wgc = math.nan
    pm = math.inf
    g = mag - 1.0
    idx = np.flatnonzero((g[:-1] > 0) & (g[1:] <= 0))
    if idx.size:
        i = int(idx[0])
        fm = lambda x: float(np.abs(np.asarray(L(np.array([x])))[0])) - 1.0
        wgc = _bisect(fm, w[i], w[i + 1], g[i], tol)
        pm = 180.0 + math.degrees(phase_at(wgc, 0.5 * (phase[i] + phase[i + 1])))

    wpc = math.nan
    gm = math.inf
    h = phase + math.pi
    idx = np.flatnonzero((h[:-1] > 0) & (h[1:] <= 0))
    if idx.size:
        i = int(idx[0])
        ref = 0.5 * (phase[i] + phase[i + 1])
        fp = lambda x: phase_at(x, ref) + math.pi
        wpc = _bisect(fp, w[i], w[i + 1], h[i], tol)
        gm = 1.0 / float(np.abs(np.asarray(L(np.array([wpc])))[0]))
    return MarginReport(gm, pm, wgc, wpc)


def bode_margins(model: TwoLevelModel, tau: float | None = None, **grid) -> MarginReport:
    """Margins of the outer open loop; ``tau`` sets every group delay to that common value."""
    if tau is not None:
        if tau < 0:
            raise ValueError("tau must be >= 0")
        model = model.with_common_delay(tau)
    return margins_from_response(lambda w: open_loop_frequency_response(model, w), **grid)


def margin_sweep(model: TwoLevelModel, taus: Sequence[float], *, jobs: int = 1) -> list[tuple[float, MarginReport]]:
    taus = [float(t) for t in taus]
    if not taus:
        raise ValueError("empty delay grid")
    if any(t < 0 for t in taus) or any(b < a for a, b in zip(taus, taus[1:])):
        raise ValueError("delay grid must be ascending and nonnegative")
    if jobs == 1:
        reports = [bode_margins(model, t) for t in taus]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(lambda t: bode_margins(model, t), taus))
    return list(zip(taus, reports))


def write_margin_csv(rows: Sequence[tuple[float, MarginReport]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("tau,gain_margin,phase_margin,wgc,wpc\n")
        for tau, r in rows:
            fh.write(",".join([_fmt(tau), _fmt(r.gain_margin), _fmt(r.phase_margin),
                               _fmt(r.gain_crossover), _fmt(r.phase_crossover)]) + "\n")
    return path
