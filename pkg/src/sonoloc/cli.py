"""Command line runner: synth, simulate, demod, locate and eval.

Every subcommand reads the same JSON config (see :mod:`sonoloc.config`),
writes its artifacts into ``--out`` and exits 0. Library errors are printed
to stderr as one JSON object and give exit status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_io import load_stream, write_wav
from .channel import Scenario, StepTrace, ideal_displacements, propagate, straight_walk, write_trajectory_csv
from .config import RunConfig, load_config
from .errors import InvalidSpec, SonolocError
from .frontend import preprocess
from .locator import (GroundFix, LineFixInput, PositionFix, Segment, solve_line, solve_multi_segment,
                      write_fixes_csv)
from .pll import PhaseTrack, displacements_at_steps, track
from .pulsedet import ScoreLevel, aggregate, detect_pulses, score_track, static_accumulate
from .streams import DisplacementSeries
from .waveform import transmit

PERCENTILES = (50, 80, 90)


# ---- evaluation report -------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    X: float
    Y: float
    run: int
    seed: int
    ranging_error: float
    direction_error: float
    detected: bool


@dataclass(frozen=True)
class EvalReport:
    """Per-run errors plus percentile and mean summaries over the detected runs."""

    rows: tuple[EvalRow, ...]
    mode: str = "displacement"
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            object.__setattr__(self, "summary", summarize(self.rows))

    @property
    def detection_rate(self) -> float:
        return self.summary["detection_rate"]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "summary": self.summary, "rows": [asdict(r) for r in self.rows]}

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n")
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["X", "Y", "run", "seed", "ranging_error", "direction_error", "detected"])
            for r in self.rows:
                w.writerow([r.X, r.Y, r.run, r.seed, f"{r.ranging_error:.6f}", f"{r.direction_error:.6f}",
                            int(r.detected)])
        return path


def _stats(values: np.ndarray) -> dict:
    if values.size == 0:
        return {f"p{p}": None for p in PERCENTILES} | {"mean": None}
    out = {f"p{p}": float(np.percentile(values, p)) for p in PERCENTILES}
    out["mean"] = float(np.mean(values))
    return out


def summarize(rows: Sequence[EvalRow]) -> dict:
    hit = [r for r in rows if r.detected]
    return {
        "runs": len(rows),
        "detection_rate": len(hit) / len(rows) if rows else 0.0,
        "ranging_error_m": _stats(np.array([r.ranging_error for r in hit])),
        "direction_error_deg": _stats(np.array([r.direction_error for r in hit])),
    }


def _truth(X: float, Y: float, n_steps: int, stride: float) -> tuple[float, float]:
    """Horizontal distance and direction at the last step point of a straight walk along +X."""
    u = X - n_steps * stride
    return math.hypot(u, Y), math.atan2(Y, u)


def _angle_error(a: float, b: float) -> float:
    return abs(math.degrees(math.remainder(a - b, 2 * math.pi)))


def _row(X, Y, run, seed, fix: PositionFix | None, n_steps, stride) -> EvalRow:
    if fix is None:
        return EvalRow(X, Y, run, seed, math.nan, math.nan, False)
    L, psi = _truth(X, Y, n_steps, stride)
    return EvalRow(X, Y, run, seed, abs(fix.distances[-1] - L), _angle_error(fix.directions[-1], psi), True)


def _displacement_run(job) -> EvalRow:
    X, Y, run, seed, ev = job
    trace = StepTrace(tuple(0.5 * np.arange(ev["n_steps"] + 1)), ev["stride"])
    d = ideal_displacements(Scenario((X, Y, ev["height"]), trace)).d
    rng = np.random.default_rng(seed)
    noisy = DisplacementSeries(d + rng.normal(0.0, ev["noise_std"], d.size))
    try:
        fix = solve_line(LineFixInput(noisy, ev["stride"], ev["height"]))
    except SonolocError:
        fix = None
    return _row(X, Y, run, seed, fix, ev["n_steps"], ev["stride"])


def _audio_run(job) -> EvalRow:
    X, Y, run, seed, cfg_data = job
    cfg = RunConfig.model_validate(cfg_data)
    ev, walk = cfg.eval, cfg.scenario.walk
    trace = straight_walk(ev.n_steps, ev.stride, walk.step_interval, walk.t0, walk.ramp_steps)
    scenario = Scenario((X, Y, ev.height), trace, seed=seed, duration=trace.step_times[-1] + cfg.scenario.tail)
    params = cfg.params()
    pll = cfg.pll_config()
    try:
        rx = propagate(transmit(params, scenario.end_time), scenario, cfg.channel_model())
        trk = track(preprocess(rx, params.carrier_freq), pll)
        d = displacements_at_steps(trk, trace, pll, cfg.locate.calibration, cfg.pll.lock_threshold)
        fix = solve_line(LineFixInput(d, ev.stride, ev.height))
    except SonolocError:
        fix = None
    return _row(X, Y, run, seed, fix, ev.n_steps, ev.stride)


def run_eval(cfg: RunConfig) -> EvalReport:
    """Batch over the ``grid x grid`` speaker positions, ``runs`` seeded trials each."""
    ev = cfg.eval
    grid = [(X, Y) for X in ev.grid for Y in ev.grid]
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(grid) * ev.runs, dtype=np.uint32)
    if ev.mode == "displacement":
        payload, fn = ev.model_dump(), _displacement_run
    else:
        payload, fn = cfg.model_dump(by_alias=True), _audio_run
    jobs = [(X, Y, r, int(seeds[i * ev.runs + r]), payload) for i, (X, Y) in enumerate(grid) for r in range(ev.runs)]
    if ev.workers > 1:
        with ProcessPoolExecutor(ev.workers) as pool:
            rows = list(pool.map(fn, jobs, chunksize=8))
    else:
        rows = [fn(j) for j in jobs]
    return EvalReport(tuple(rows), ev.mode)


# ---- pipeline helpers --------------------------------------------------------

def trace_to_dict(trace: StepTrace) -> dict:
    return {"step_times": list(trace.step_times), "stride": trace.stride,
            "turns": [list(t) for t in trace.segment_turns], "start_point": list(trace.start_point)}


def trace_from_dict(data: dict) -> StepTrace:
    try:
        return StepTrace(tuple(data["step_times"]), data["stride"], tuple(tuple(t) for t in data.get("turns", ())),
                         tuple(data.get("start_point", (0.0, 0.0))))
    except (KeyError, TypeError) as exc:
        raise InvalidSpec(f"malformed steps file: {exc}") from None


def demodulate(stream, cfg: RunConfig):
    """PLL track, score series at the configured level and detected arrivals."""
    params = cfg.params()
    pll = cfg.pll_config()
    clean = preprocess(stream, params.carrier_freq)
    trk = track(clean, pll)
    score = score_track(clean, trk.phi, params, pll.freq_offset)
    level = ScoreLevel(cfg.detect.level)
    if level in (ScoreLevel.M1, ScoreLevel.M2, ScoreLevel.M3):
        score = aggregate(score, params, ScoreLevel.M1)
    if level is ScoreLevel.M2:
        score = aggregate(score, params, ScoreLevel.M2)
    elif level is ScoreLevel.M3:
        score = static_accumulate(score, params)
    return trk, score


def locate_walk(trk: PhaseTrack, trace: StepTrace, cfg: RunConfig) -> list[PositionFix | GroundFix]:
    """One line fix per straight run with two or more strides, plus a pooled fix when the walk turns."""
    pll = trk.config
    stride = cfg.stride()
    h = cfg.locate.height
    d = displacements_at_steps(trk, trace, pll, cfg.locate.calibration, cfg.pll.lock_threshold)
    runs = trace.segments()
    fixes: list[PositionFix | GroundFix] = []
    segments = []
    for first, count, heading in runs:
        part = DisplacementSeries(d.d[first:first + count], d.step_times[first:first + count + 1])
        segments.append(Segment(part, heading))
        if len(runs) == 1:
            fixes.append(solve_line(LineFixInput(part, stride, h)))
        elif int(np.sum(part.valid)) >= 2:
            try:
                fixes.append(solve_line(LineFixInput(part, stride, h)))
            except SonolocError:
                pass
    if len(runs) > 1:
        g = solve_multi_segment(segments, stride, h)
        fixes.append(GroundFix(g.gx, g.gy, g.provenance, float(trace.step_times[-1]), g.residual))
    return fixes


# ---- subcommands -------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args, out: Path) -> dict:
    params = cfg.params()
    duration = args.duration or cfg.build_scenario().end_time
    path = write_wav(transmit(params, duration), out / "tx.wav", args.format)
    return {"tx": str(path), "duration": duration, "carrier_freq": params.carrier_freq}


def cmd_simulate(cfg: RunConfig, args, out: Path) -> dict:
    params = cfg.params()
    scenario = cfg.build_scenario()
    if args.input:
        tx = load_stream(args.input)
    else:
        tx = transmit(params, scenario.end_time)
    rx = propagate(tx, scenario, cfg.channel_model())
    write_wav(rx, out / "rx.wav", args.format)
    write_trajectory_csv(scenario, out / "truth.csv")
    (out / "steps.json").write_text(json.dumps(trace_to_dict(scenario.trajectory), indent=2) + "\n")
    return {"rx": str(out / "rx.wav"), "truth": str(out / "truth.csv"), "steps": str(out / "steps.json"),
            "duration": scenario.end_time}


def cmd_demod(cfg: RunConfig, args, out: Path) -> dict:
    stream = load_stream(args.input)
    trk, score = demodulate(stream, cfg)
    trk.write_csv(out / "phase.csv", args.decimate)
    score.write_csv(out / "score.csv")
    result = {"phase": str(out / "phase.csv"), "score": str(out / "score.csv"), "level": score.level.value}
    arrivals = detect_pulses(score, cfg.params(), cfg.detect.sigmas)
    arrivals.write_csv(out / "arrivals.csv")
    result.update(arrivals=str(out / "arrivals.csv"), detections=len(arrivals))
    return result


def cmd_locate(cfg: RunConfig, args, out: Path) -> dict:
    trk = PhaseTrack.read_csv(args.phase, cfg.pll_config())
    try:
        trace = trace_from_dict(json.loads(Path(args.steps).read_text()))
    except FileNotFoundError:
        raise InvalidSpec(f"steps file {args.steps} not found") from None
    fixes = locate_walk(trk, trace, cfg)
    write_fixes_csv(fixes, out / "fixes.csv")
    return {"fixes": str(out / "fixes.csv"), "count": len(fixes)}


def cmd_eval(cfg: RunConfig, args, out: Path) -> dict:
    report = run_eval(cfg)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    return {"report": str(out / "report.json"), "rows": len(report.rows), "summary": report.summary}


COMMANDS = {"synth": cmd_synth, "simulate": cmd_simulate, "demod": cmd_demod, "locate": cmd_locate,
            "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--channel", type=float, help="carrier frequency in Hz")

    ap = argparse.ArgumentParser(prog="sonoloc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="transmit waveform to WAV")
    p.add_argument("--duration", type=float, help="seconds (default: scenario duration)")
    p.add_argument("--format", choices=("float32", "pcm16"), default="float32")
    p = sub.add_parser("simulate", parents=[common], help="scenario to received WAV and truth CSV")
    p.add_argument("--input", help="transmit WAV to propagate instead of synthesizing one")
    p.add_argument("--format", choices=("float32", "pcm16"), default="float32")
    p = sub.add_parser("demod", parents=[common], help="WAV to phase track, score and arrival CSVs")
    p.add_argument("input", help="received WAV or raw float32 file")
    p.add_argument("--decimate", type=int, default=1, help="keep every n-th phase sample")
    p = sub.add_parser("locate", parents=[common], help="phase track and steps to fix CSV")
    p.add_argument("--phase", required=True, help="phase.csv from demod")
    p.add_argument("--steps", required=True, help="steps.json from simulate")
    sub.add_parser("eval", parents=[common], help="batch evaluation to report JSON/CSV")
    return ap


def _fail(exc: Exception) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise InvalidSpec("seed must be non-negative")
        cfg = load_config(args.config).override(args.seed, args.channel)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, args, out)
    except (SonolocError, OSError) as exc:
        return _fail(exc)
    print(json.dumps({"command": args.command} | result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
