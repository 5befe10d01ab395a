"""Command-line front end.

Every command writes its artifacts plus ``manifest.json`` into ``--out``.
Exit codes: 0 ok, 1 configuration error, 2 infeasible schedule, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (
    bode_margins,
    json_number,
    margin_sweep,
    monte_carlo,
    scenario_metrics,
    write_margin_csv,
    write_monte_carlo_csv,
)
from .model import DelaySystem, FFPIParams, PIParams, assemble_full_system, assemble_inner_loop
from .scheduler import FleetSpec, InfeasibleSchedule, schedule
from .stability import ConvergenceError, char_residual, parameter_sweep, stability_index, write_sweep_csv
from .testbed.scenario import Scenario, ScenarioError, default_scenario_text, load_scenario
from .testbed.simulate import SimulationDiverged, simulate_closed_loop, write_trace_csv

log = logging.getLogger("drflex")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "DRFLEX_SEED"

BENCHMARKS = {
    # x' = -a x(t - 1)
    "hayes": 1.0,
    "boundary": math.pi / 2.0,
}


class ConfigError(Exception):
    pass


def parse_range(text: str) -> np.ndarray:
    """``a:step:b`` (inclusive) or a single value."""
    parts = text.split(":")
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"bad range {text!r}: expected a:step:b") from None
    if len(nums) == 1:
        return np.array(nums)
    if len(nums) != 3:
        raise ConfigError(f"bad range {text!r}: expected a:step:b")
    a, step, b = nums
    if not step > 0:
        raise ConfigError(f"bad range {text!r}: step must be > 0")
    if b < a:
        raise ConfigError(f"bad range {text!r}: end below start")
    count = (b - a) / step
    n = int(round(count))
    if abs(count - n) > 1e-6:
        raise ConfigError(f"bad range {text!r}: (b - a) is not a multiple of step")
    return np.round(a + step * np.arange(n + 1), 12)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _scenario_source(path: str) -> tuple[Scenario, str, str]:
    """Scenario plus the (path, sha256) pair recorded in the manifest."""
    if path == "default":
        text = default_scenario_text()
        return Scenario.from_dict(json.loads(text)), "default", _sha256(text.encode())
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"scenario file not found: {p}")
    scenario = load_scenario(p)
    return scenario, str(p), _sha256(p.read_bytes())


def _resolve_seed(cli_seed: int | None, fallback: int) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return fallback


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


class _Run:
    """Collects outputs and writes the manifest."""

    def __init__(self, command: str, out: Path):
        self.command = command
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self.scenario_path: str | None = None
        self.scenario_hash: str | None = None
        self.seed: int | None = None
        self.start = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "scenario": {"path": self.scenario_path, "sha256": self.scenario_hash},
            "seed": self.seed,
            "version": __version__,
            "outputs": [{"file": p.name, "sha256": _sha256(p.read_bytes())} for p in self.outputs],
            "wall_time_s": round(time.perf_counter() - self.start, 3),
        }
        return _write_json(self.out / "manifest.json", manifest)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    scenario, spath, shash = _scenario_source(args.scenario)
    seed = _resolve_seed(args.seed, scenario.seed)
    changes = {"seed": seed}
    if args.open_loop:
        changes["mode"] = "open_loop"
    if args.duration is not None:
        changes["duration"] = args.duration
    scenario = scenario.with_(**changes)
    run = _Run("simulate", Path(args.out))
    run.scenario_path, run.scenario_hash, run.seed = spath, shash, seed
    try:
        trace = simulate_closed_loop(scenario)
    except SimulationDiverged as exc:
        write_trace_csv(exc.trace, run.path("trace.csv"))
        run.finish()
        raise
    write_trace_csv(trace, run.path("trace.csv"))
    events = scenario.target.events(scenario.duration)
    metrics: dict = {}
    if events:
        worst, per = scenario_metrics(trace, events)
        metrics = worst.to_dict()
        metrics["steps"] = [m.to_dict() for m in per]
    metrics["mode"] = scenario.mode
    metrics["events"] = list(trace.events)
    _write_json(run.path("metrics.json"), metrics)
    if args.plot:
        from .plotting import plot_trace

        plot_trace(trace, run.path("trace.png"), f"{scenario.name} ({scenario.mode.replace('_', ' ')})")
    run.finish()
    print(json.dumps({k: metrics.get(k) for k in ("initial_response_s", "ramp_time_s", "h2", "ss_error_kw",
                                                  "ss_osc_kw")}))
    return EXIT_OK


def _sweep_builder(scenario: Scenario, loop: str):
    model = scenario.model
    if loop == "outer":
        return lambda kp, ki: assemble_full_system(model.with_outer(PIParams(kp, ki)))
    if loop.startswith("inner:"):
        name = loop.split(":", 1)[1]
        groups = {g.name: g for g in model.groups}
        if name not in groups:
            raise ConfigError(f"unknown group {name!r}; choose from {sorted(groups)}")
        g = groups[name]

        def build(kp: float, ki: float) -> DelaySystem:
            c = g.controller
            ctrl = FFPIParams(PIParams(kp, ki), c.t_ff, c.h_nom, c.t_filter) if isinstance(c, FFPIParams) \
                else PIParams(kp, ki)
            return assemble_inner_loop(g.with_(controller=ctrl))

        return build
    raise ConfigError(f"--loop must be 'outer' or 'inner:<group>', got {loop!r}")


def cmd_sweep(args) -> int:
    scenario, spath, shash = _scenario_source(args.scenario)
    kp, ki = parse_range(args.kp), parse_range(args.ki)
    build = _sweep_builder(scenario, args.loop)
    run = _Run("sweep", Path(args.out))
    run.scenario_path, run.scenario_hash = spath, shash
    values = parameter_sweep(build, kp, ki, "stability_index" if args.metric == "index" else "h2",
                             N=args.N, jobs=args.jobs)
    write_sweep_csv(run.path("sweep.csv"), kp, ki, values)
    if args.plot:
        from .plotting import plot_sweep

        plot_sweep(kp, ki, values, run.path("sweep.png"), args.metric)
    run.finish()
    finite = values[np.isfinite(values)]
    print(f"{values.size} points, {args.metric} range "
          f"[{finite.min() if finite.size else float('nan'):.6g}, {finite.max() if finite.size else float('nan'):.6g}]")
    return EXIT_OK


def cmd_stability(args) -> int:
    run = _Run("stability", Path(args.out))
    if args.benchmark:
        a = BENCHMARKS[args.benchmark]
        sys_ = DelaySystem.build(np.zeros((1, 1)), [(np.array([[-a]]), 1.0)])
        label = f"benchmark {args.benchmark}: x' = -{a:.6g} x(t-1)"
    else:
        scenario, run.scenario_path, run.scenario_hash = _scenario_source(args.scenario)
        model = scenario.model
        if args.common_delay is not None:
            model = model.with_common_delay(args.common_delay)
        sys_ = assemble_full_system(model)
        label = f"full system of {scenario.name}"
    rep = stability_index(sys_, args.N, strict=args.strict)
    order = np.argsort(-rep.all_eigs.real)[: args.top]
    data = {
        "system": label,
        "N": rep.N,
        "index": rep.index,
        "rightmost": {"re": rep.rightmost.real, "im": rep.rightmost.imag},
        "converged": bool(rep.converged),
        "stable": bool(rep.index < 0),
        "eigenvalues": [{"re": float(rep.all_eigs[i].real), "im": float(rep.all_eigs[i].imag),
                         "residual": json_number(char_residual(sys_, complex(rep.all_eigs[i])))} for i in order],
    }
    _write_json(run.path("stability.json"), data)
    run.finish()
    print(f"index = {rep.index:.10f}  rightmost = {rep.rightmost.real:.10f}{rep.rightmost.imag:+.10f}j  "
          f"converged = {rep.converged}")
    return EXIT_OK


def cmd_bode(args) -> int:
    scenario, spath, shash = _scenario_source(args.scenario)
    taus = parse_range(args.taus)
    run = _Run("bode", Path(args.out))
    run.scenario_path, run.scenario_hash = spath, shash
    rows = margin_sweep(scenario.model, taus, jobs=args.jobs)
    write_margin_csv(rows, run.path("margins.csv"))
    if args.plot:
        from .plotting import plot_bode, plot_margins

        plot_margins(rows, run.path("margins.png"))
        plot_bode(scenario.model, taus, run.path("bode.png"))
    run.finish()
    for tau, r in rows:
        print(f"tau={tau:g}  GM={r.gain_margin:.4f}  PM={r.phase_margin:.3f} deg")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    scenario, spath, shash = _scenario_source(args.scenario)
    seed = _resolve_seed(args.seed, scenario.seed)
    run = _Run("montecarlo", Path(args.out))
    run.scenario_path, run.scenario_hash, run.seed = spath, shash, seed
    evaluate = None
    if args.full_sim:
        evaluate = _full_sim_evaluator(scenario, args.uncertainty)
    summary = monte_carlo(scenario.model, args.uncertainty, args.pct, args.n, seed, N=args.N,
                          jobs=args.jobs, evaluate=evaluate)
    write_monte_carlo_csv(summary, run.path("montecarlo.csv"))
    (run.path("montecarlo.json")).write_text(summary.to_json() + "\n")
    if args.plot:
        from .plotting import plot_monte_carlo

        plot_monte_carlo(summary, run.path("montecarlo.png"))
    run.finish()
    print(f"{summary.n_samples} samples, stable fraction {summary.stable_fraction:.4f}")
    return EXIT_OK


def _full_sim_evaluator(scenario: Scenario, uncertainty: str):
    """H2 of the first target step on the device-level simulator with perturbed devices."""
    from dataclasses import replace

    from .analysis import h2_metric

    events = scenario.target.events(scenario.duration)
    if not events:
        raise ConfigError("--full-sim needs a target step inside the simulated window")
    t_step = events[0][0]
    span = min(100.0, (events[1][0] if len(events) > 1 else scenario.duration) - t_step)

    def evaluate(_model, factors) -> float:
        groups = []
        for g, f in zip(scenario.groups, factors):
            sp = g.spread
            if uncertainty == "gain":
                sp = replace(sp, bias_range=(sp.bias_range[0] * f, sp.bias_range[1] * f))
            else:
                sp = replace(sp, delay_range=(sp.delay_range[0] * f, sp.delay_range[1] * f))
            groups.append(replace(g, spread=sp))
        trace = simulate_closed_loop(scenario.with_(groups=tuple(groups)))
        return h2_metric(trace, None, span, t_step)

    return evaluate


def _load_fleet(spec: str) -> FleetSpec:
    if spec == "default":
        fleets = [g.fleet() for g in load_scenario("default").groups]
        out = fleets[0]
        for f in fleets[1:]:
            out = out + f
        return out
    p = Path(spec)
    if not p.is_file():
        raise ConfigError(f"fleet file not found: {p}")
    try:
        return FleetSpec.load(p)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed fleet file {p}: {exc}") from exc


def cmd_schedule(args) -> int:
    fleet = _load_fleet(args.fleet)
    run = _Run("schedule", Path(args.out))
    if args.fleet != "default":
        run.scenario_path, run.scenario_hash = args.fleet, _sha256(Path(args.fleet).read_bytes())
    a = schedule(fleet, args.target, args.q)
    data = a.to_dict()
    data["target"] = args.target
    data["uncontrollable"] = args.q
    _write_json(run.path("schedule.json"), data)
    run.finish()
    print(json.dumps(data, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drflex", description="Demand-response fleet control toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True, plot=True, jobs=False):
        sp.add_argument("--out", default="drflex-out", help="output directory (default: drflex-out)")
        if scenario:
            sp.add_argument("--scenario", default="default", help="scenario JSON file or 'default'")
        if plot:
            sp.add_argument("--no-plot", dest="plot", action="store_false", help="skip PNG figures")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")

    sp = sub.add_parser("simulate", help="run the device-level testbed")
    common(sp)
    sp.add_argument("--open-loop", action="store_true", help="scheduler-only dispatch, no feedback")
    sp.add_argument("--seed", type=int, default=None, help=f"override the scenario seed (also {SEED_ENV})")
    sp.add_argument("--duration", type=float, default=None, help="override the simulated duration [s]")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="stability-index or H2 grid over PI gains")
    common(sp, jobs=True)
    sp.add_argument("--loop", default="inner:racks", help="'outer' or 'inner:<group>'")
    sp.add_argument("--kp", required=True, help="a:step:b")
    sp.add_argument("--ki", required=True, help="a:step:b")
    sp.add_argument("--metric", choices=("index", "h2"), default="index")
    sp.add_argument("--N", type=int, default=20, help="Chebyshev order")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("stability", help="rightmost characteristic root")
    common(sp, plot=False)
    sp.add_argument("--benchmark", choices=sorted(BENCHMARKS), default=None)
    sp.add_argument("--common-delay", type=float, default=None, help="set every group delay to this value [s]")
    sp.add_argument("--N", type=int, default=20)
    sp.add_argument("--top", type=int, default=10, help="eigenvalues to list")
    sp.add_argument("--strict", action="store_true", help="fail (exit 3) when refinement does not converge")
    sp.set_defaults(func=cmd_stability)

    sp = sub.add_parser("bode", help="gain and phase margins versus a common delay")
    common(sp, jobs=True)
    sp.add_argument("--taus", default="0:1:10", help="a:step:b delay grid [s]")
    sp.set_defaults(func=cmd_bode)

    sp = sub.add_parser("montecarlo", help="robustness to gain or delay uncertainty")
    common(sp, jobs=True)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--pct", type=float, default=0.2, help="relative half-width of the uniform draw")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--uncertainty", choices=("gain", "delay"), default="gain")
    sp.add_argument("--full-sim", action="store_true", help="H2 from the device-level simulator (slow)")
    sp.add_argument("--N", type=int, default=20)
    sp.set_defaults(func=cmd_montecarlo)

    sp = sub.add_parser("schedule", help="solve one device dispatch")
    common(sp, scenario=False, plot=False)
    sp.add_argument("--fleet", default="default", help="fleet JSON file or 'default'")
    sp.add_argument("--target", type=float, required=True, help="power cap [kW]")
    sp.add_argument("--q", type=float, default=0.0, help="uncontrollable load [kW]")
    sp.set_defaults(func=cmd_schedule)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"drflex: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleSchedule as exc:
        print(f"drflex: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SimulationDiverged, ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"drflex: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"drflex: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
