"""Fixed-step RK4 integration of linear delay systems.

Delayed states come from a ring buffer of past grid values through
four-point Lagrange interpolation, so stage evaluations between grid points
keep fourth-order accuracy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from ..model import DelaySystem

__all__ = ["DDETrace", "simulate_dde", "default_dt"]

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True, eq=False)
class DDETrace:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray | None
    dt: float
    diverged: bool = False


@njit(cache=True)
def _delayed(ring, L, k, pos, hist, out):
    """Write x at fractional grid position ``pos`` into ``out`` (k = newest stored index)."""
    n = out.shape[0]
    if pos <= 0.0:
        for d in range(n):
            out[d] = hist[d]
        return
    i = int(math.floor(pos))
    i0 = i - 1
    if i0 < 0:
        i0 = 0
    if i0 + 3 > k:
        i0 = k - 3
    s = pos - i0
    # Lagrange weights on nodes 0, 1, 2, 3
    w0 = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0
    w1 = s * (s - 2.0) * (s - 3.0) / 2.0
    w2 = -s * (s - 1.0) * (s - 3.0) / 2.0
    w3 = s * (s - 1.0) * (s - 2.0) / 6.0
    r0 = i0 % L
    r1 = (i0 + 1) % L
    r2 = (i0 + 2) % L
    r3 = (i0 + 3) % L
    for d in range(n):
        out[d] = w0 * ring[r0, d] + w1 * ring[r1, d] + w2 * ring[r2, d] + w3 * ring[r3, d]


@njit(cache=True)
def _rhs(a0, amats, rows, lags, ring, L, k, pos, x, hist, forcing, out, tmp):
    n = x.shape[0]
    for r in range(n):
        acc = forcing[r]
        for c in range(n):
            acc += a0[r, c] * x[c]
        out[r] = acc
    for m in range(amats.shape[0]):
        _delayed(ring, L, k, pos - lags[m], hist, tmp)
        for r in range(n):
            if not rows[m, r]:
                continue
            acc = 0.0
            for c in range(n):
                acc += amats[m, r, c] * tmp[c]
            out[r] += acc


@njit(cache=True, nogil=True)
def _rk4(a0, amats, rows, lags, forcing, x0, hist, dt, steps, L, record_every, limit):
    n = x0.shape[0]
    n_rec = steps // record_every + 1
    rec = np.empty((n_rec, n))
    ring = np.empty((L, n))
    for d in range(n):
        ring[0, d] = x0[d]
        rec[0, d] = x0[d]
    x = x0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xs = np.empty(n)
    tmp = np.empty(n)
    diverged = False
    last = 0
    for k in range(steps):
        # k is also the newest index present in the ring buffer
        _rhs(a0, amats, rows, lags, ring, L, k, float(k), x, hist, forcing[2 * k], k1, tmp)
        for d in range(n):
            xs[d] = x[d] + 0.5 * dt * k1[d]
        _rhs(a0, amats, rows, lags, ring, L, k, k + 0.5, xs, hist, forcing[2 * k + 1], k2, tmp)
        for d in range(n):
            xs[d] = x[d] + 0.5 * dt * k2[d]
        _rhs(a0, amats, rows, lags, ring, L, k, k + 0.5, xs, hist, forcing[2 * k + 1], k3, tmp)
        for d in range(n):
            xs[d] = x[d] + dt * k3[d]
        _rhs(a0, amats, rows, lags, ring, L, k, k + 1.0, xs, hist, forcing[2 * k + 2], k4, tmp)
        big = False
        for d in range(n):
            x[d] += dt * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]) / 6.0
            if not (abs(x[d]) <= limit):
                big = True
        slot = (k + 1) % L
        for d in range(n):
            ring[slot, d] = x[d]
        if (k + 1) % record_every == 0:
            j = (k + 1) // record_every
            for d in range(n):
                rec[j, d] = x[d]
            last = j
        if big:
            diverged = True
            break
    return rec[: last + 1], diverged


def default_dt(sys: DelaySystem) -> float:
    """Largest step satisfying dt <= min(tau)/10 and dt <= (fastest time constant)/5.

    The fastest time constant is taken as 1/spectral radius of A0.
    """
    limits = [0.05]
    if sys.terms:
        limits.append(min(sys.taus) / 10.0)
    rho = float(np.max(np.abs(np.linalg.eigvals(sys.a0))))
    if rho > 0:
        limits.append(1.0 / (5.0 * rho))
    return min(limits)


def _input_samples(u, times: np.ndarray) -> np.ndarray:
    if u is None:
        return np.zeros_like(times)
    if callable(u):
        return np.array([float(u(t)) for t in times])
    return np.where(times >= 0.0, float(u), 0.0)


def simulate_dde(
    sys: DelaySystem,
    history=0.0,
    duration: float = 100.0,
    dt: float | None = None,
    *,
    u: float | Callable[[float], float] | None = None,
    record_every: int = 1,
) -> DDETrace:
    """Integrate ``sys`` from a constant history on [-tau_max, 0].

    ``u`` drives the input channel: a number is a step of that size at t = 0
    (zero before), a callable is sampled directly and must return the input
    for negative times as well.
    """
    n = sys.dim
    hist = np.broadcast_to(np.asarray(history, dtype=float), (n,)).copy()
    if dt is None:
        dt = default_dt(sys)
    rho = float(np.max(np.abs(np.linalg.eigvals(sys.a0))))
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if sys.terms and dt > min(sys.taus) / 10.0 * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds min(tau)/10 = {min(sys.taus) / 10.0}")
    if rho > 0 and dt > 1.0 / (5.0 * rho) * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the fastest time constant / 5 = {1.0 / (5.0 * rho)}")
    if duration < dt:
        raise ValueError("duration must be >= dt")
    steps = int(round(duration / dt))
    half = np.arange(2 * steps + 1) * (dt / 2.0)
    forcing = np.zeros((2 * steps + 1, n))
    if u is not None:
        if sys.b0 is None:
            raise ValueError("system has no input channel")
        forcing += np.outer(_input_samples(u, half), sys.b0)
        for term in sys.terms:
            if term.b is not None and term.b.any():
                forcing += np.outer(_input_samples(u, half - term.tau), term.b)
    if sys.terms:
        amats = np.stack([t.a for t in sys.terms])
        lags = np.array(sys.taus) / dt
    else:
        amats = np.zeros((0, n, n))
        lags = np.zeros(0)
    L = int(math.ceil(sys.tau_max / dt)) + 8
    rec, diverged = _rk4(
        np.ascontiguousarray(sys.a0), np.ascontiguousarray(amats), np.any(amats != 0.0, axis=2), lags, forcing,
        hist.copy(), hist, float(dt), steps, L, int(record_every), DIVERGENCE_LIMIT,
    )
    t = np.arange(rec.shape[0]) * dt * record_every
    y = rec @ sys.c if sys.c is not None else None
    return DDETrace(t, rec, y, float(dt), bool(diverged))
