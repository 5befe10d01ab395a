"""PNG figures written next to the CSV outputs.

Uses the object-oriented matplotlib API (no pyplot global state), so it is
safe in headless runs and threads.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.figure import Figure

from .analysis import MarginReport, MonteCarloSummary
from .model import TwoLevelModel, open_loop_frequency_response

_META = {"Software": None}  # keeps PNG bytes independent of the matplotlib version string


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    return path


def plot_trace(trace, path: str | Path, title: str = "") -> Path:
    fig = Figure(figsize=(9, 6.5))
    ax1, ax2 = fig.subplots(2, 1, sharex=True)
    ax1.plot(trace.t, trace.target, color="tab:blue", lw=1.2, label="target")
    ax1.plot(trace.t, trace.obs, color="tab:red", lw=0.8, label="measured")
    ax1.set_ylabel("aggregate power [kW]")
    ax1.legend(loc="best")
    if title:
        ax1.set_title(title)
    for i, name in enumerate(trace.group_names):
        line, = ax2.plot(trace.t, trace.power[:, i], lw=0.8, label=f"{name} power")
        ax2.plot(trace.t, trace.ref[:, i], lw=0.8, ls="--", color=line.get_color(), label=f"{name} ref")
    ax2.set_xlabel("time [s]")
    ax2.set_ylabel("group power [kW]")
    ax2.legend(loc="best", fontsize="small", ncol=2)
    return _save(fig, path)


def plot_sweep(kp: Sequence[float], ki: Sequence[float], values: np.ndarray, path: str | Path,
               metric: str = "index") -> Path:
    kp, ki = np.asarray(kp), np.asarray(ki)
    fig = Figure(figsize=(6.5, 5))
    ax = fig.subplots()
    z = np.where(np.isfinite(values), values, np.nan)
    if kp.size > 1 and ki.size > 1 and np.isfinite(z).sum() > 3:
        cs = ax.contourf(kp, ki, z, levels=20, cmap="viridis")
        fig.colorbar(cs, ax=ax, label=metric)
        if metric == "index" and np.nanmin(z) < 0 < np.nanmax(z):
            ax.contour(kp, ki, z, levels=[0.0], colors="red", linewidths=1.5)
    else:
        KP, KI = np.meshgrid(kp, ki)
        sc = ax.scatter(KP.ravel(), KI.ravel(), c=z.ravel(), cmap="viridis")
        fig.colorbar(sc, ax=ax, label=metric)
    ax.set_xlabel("kp")
    ax.set_ylabel("ki [1/s]")
    return _save(fig, path)


def plot_margins(rows: Sequence[tuple[float, MarginReport]], path: str | Path) -> Path:
    taus = np.array([t for t, _ in rows])
    gm = np.array([r.gain_margin_db for _, r in rows])
    pm = np.array([r.phase_margin for _, r in rows])
    fig = Figure(figsize=(8, 3.5))
    ax1, ax2 = fig.subplots(1, 2)
    ax1.plot(taus, np.where(np.isfinite(gm), gm, np.nan), "o-")
    ax1.set_xlabel("common delay [s]")
    ax1.set_ylabel("gain margin [dB]")
    ax2.plot(taus, pm, "o-", color="tab:orange")
    ax2.set_xlabel("common delay [s]")
    ax2.set_ylabel("phase margin [deg]")
    return _save(fig, path)


def plot_bode(model: TwoLevelModel, taus: Sequence[float], path: str | Path,
              w: np.ndarray | None = None) -> Path:
    w = np.logspace(-4, 2, 800) if w is None else w
    fig = Figure(figsize=(8, 6))
    ax1, ax2 = fig.subplots(2, 1, sharex=True)
    for tau in taus:
        L = open_loop_frequency_response(model.with_common_delay(float(tau)), w)
        ax1.semilogx(w, 20 * np.log10(np.abs(L)), lw=0.9, label=f"tau={tau:g} s")
        ax2.semilogx(w, np.degrees(np.unwrap(np.angle(L))), lw=0.9)
    ax1.axhline(0.0, color="k", lw=0.5)
    ax2.axhline(-180.0, color="k", lw=0.5)
    ax1.set_ylabel("|L| [dB]")
    ax2.set_ylabel("phase [deg]")
    ax2.set_xlabel("frequency [rad/s]")
    ax2.set_ylim(-720, 0)
    ax1.legend(fontsize="small", ncol=2)
    return _save(fig, path)


def plot_monte_carlo(summary: MonteCarloSummary, path: str | Path) -> Path:
    fig = Figure(figsize=(8, 3.5))
    ax1, ax2 = fig.subplots(1, 2)
    idx = summary.index[np.isfinite(summary.index)]
    h2 = summary.h2[np.isfinite(summary.h2)]
    ax1.hist(idx, bins=30, color="tab:blue")
    ax1.axvline(0.0, color="red", lw=1)
    ax1.set_xlabel("stability index [1/s]")
    ax1.set_ylabel("samples")
    ax2.hist(h2, bins=30, color="tab:green")
    ax2.set_xlabel("H2 [kW^2 s]")
    fig.suptitle(f"{summary.uncertainty} +/-{summary.pct:.0%}, n={summary.n_samples}, "
                 f"stable {summary.stable_fraction:.1%}")
    return _save(fig, path)
