"""JSON run configuration for the command line tools.

Every section rejects unknown keys so that typos fail loudly, and the file
carries ``"schema": 1``. Section defaults reproduce the library defaults.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .channel import ChannelModel, EchoPath, Scenario, StepTrace, back_and_forth, static_trace, straight_walk
from .errors import InvalidSpec
from .locator import ANCHOR_MAX_DISTANCE, ANCHOR_MAX_RMS
from .pll import DEFAULT_DAMPING, DEFAULT_NATURAL_FREQ, LOCK_THRESHOLD, PllConfig, loop_gains
from .pulsedet import DETECTION_SIGMAS
from .waveform import WaveformParams

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WaveformSection(_Section):
    carrier_freq: float = 19000.0
    sample_rate: float = 44100.0
    pulse_duration: float = 0.007
    carrier_duration: float = 0.16
    cycle_period: float = 0.25
    pulse_spacing: float = 0.03
    max_range: float = 85.0
    sound_speed: float = 340.0

    def params(self) -> WaveformParams:
        return WaveformParams(**self.model_dump()).validate()


class WalkSection(_Section):
    """Receiver motion. ``kind`` picks the generator; ``steps`` takes explicit heel-strike times."""

    kind: Literal["static", "straight", "back_and_forth", "steps"] = "straight"
    n_steps: int = Field(10, ge=1)
    stride: float = Field(0.6, gt=0)
    step_interval: float = Field(0.5, gt=0)
    t0: float = Field(1.0, ge=0)
    ramp_steps: int = Field(3, ge=0)
    turns: list[tuple[int, float]] = []
    start_point: tuple[float, float] = (0.0, 0.0)
    amplitude: float = Field(1.0, gt=0)
    cycles: int = Field(3, ge=1)
    period: float = Field(6.0, gt=0)
    resolution: float = Field(0.01, gt=0)
    step_times: list[float] = []

    def trace(self) -> StepTrace:
        if self.kind == "static" or (self.kind == "steps" and not self.step_times):
            return static_trace(self.start_point)
        if self.kind == "straight":
            return straight_walk(self.n_steps, self.stride, self.step_interval, self.t0, self.ramp_steps,
                                 tuple(self.turns), self.start_point)
        if self.kind == "back_and_forth":
            return back_and_forth(self.amplitude, self.cycles, self.period, self.t0, self.resolution,
                                  start_point=self.start_point)
        return StepTrace(tuple(self.step_times), self.stride, tuple(self.turns), self.start_point)


class EchoSection(_Section):
    gain: float
    extra_delay: float = 0.0
    image: tuple[float, float, float] | None = None


class ChannelSection(_Section):
    snr_db: float | None = None
    freq_offset: float = 0.0
    echoes: list[EchoSection] = []
    attenuation_exponent: float = 1.0
    interp_taps: int = 96

    def model(self, nominal_freq: float, sound_speed: float) -> ChannelModel:
        paths = tuple(EchoPath(e.gain, e.extra_delay, e.image) for e in self.echoes)
        return ChannelModel(self.snr_db, paths, self.freq_offset, self.attenuation_exponent,
                            nominal_freq=nominal_freq, sound_speed=sound_speed, interp_taps=self.interp_taps)


class ScenarioSection(_Section):
    speaker: tuple[float, float, float] = (4.0, 4.0, 0.0)
    walk: WalkSection = WalkSection()
    duration: float | None = Field(None, gt=0)
    tail: float = Field(1.0, ge=0)

    def scenario(self, seed: int) -> Scenario:
        trace = self.walk.trace()
        duration = self.duration if self.duration is not None else max(trace.step_times[-1] + self.tail, 2.0)
        return Scenario(self.speaker, trace, seed=seed, duration=duration)


class PllSection(_Section):
    natural_freq: float = Field(DEFAULT_NATURAL_FREQ, gt=0)
    damping: float = Field(DEFAULT_DAMPING, gt=0)
    first_order: bool = False
    lpf_cutoff: float = 2000.0
    freq_offset: float = 0.0
    lock_threshold: float = LOCK_THRESHOLD

    def config(self, params: WaveformParams) -> PllConfig:
        k1, k2 = loop_gains(self.natural_freq, self.damping, params.sample_rate)
        return PllConfig(k1=k1, k2=0.0 if self.first_order else k2, carrier_freq=params.carrier_freq,
                         sample_rate=params.sample_rate, lpf_cutoff=self.lpf_cutoff,
                         freq_offset=self.freq_offset, sound_speed=params.sound_speed)


class DetectSection(_Section):
    level: Literal["m", "m1", "m2", "m3"] = "m2"
    sigmas: float = Field(DETECTION_SIGMAS, gt=0)


class LocateSection(_Section):
    stride: float | None = Field(None, gt=0)
    height: float = Field(0.0, ge=0)
    calibration: Literal["none", "forward", "backward", "auto"] = "none"
    anchor_max_distance: float = ANCHOR_MAX_DISTANCE
    anchor_max_rms: float = ANCHOR_MAX_RMS


class EvalSection(_Section):
    """Batch evaluation over a grid of speaker positions.

    ``displacement`` mode perturbs exact per-step displacements with Gaussian
    noise; ``audio`` mode runs the full simulate/track/locate chain.
    """

    mode: Literal["displacement", "audio"] = "displacement"
    grid: list[float] = [2.0, 4.0, 6.0, 8.0]
    runs: int = Field(35, ge=1)
    n_steps: int = Field(10, ge=2)
    stride: float = Field(0.6, gt=0)
    height: float = Field(0.0, ge=0)
    noise_std: float = Field(0.005, ge=0)
    workers: int = Field(1, ge=1)


class RunConfig(_Section):
    schema_version: Literal[1] = Field(SCHEMA_VERSION, alias="schema")
    seed: int = Field(0, ge=0)
    waveform: WaveformSection = WaveformSection()
    scenario: ScenarioSection = ScenarioSection()
    channel: ChannelSection = ChannelSection()
    pll: PllSection = PllSection()
    detect: DetectSection = DetectSection()
    locate: LocateSection = LocateSection()
    eval: EvalSection = EvalSection()

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    def params(self) -> WaveformParams:
        return self.waveform.params()

    def channel_model(self) -> ChannelModel:
        return self.channel.model(self.waveform.carrier_freq, self.waveform.sound_speed)

    def build_scenario(self) -> Scenario:
        return self.scenario.scenario(self.seed)

    def pll_config(self) -> PllConfig:
        return self.pll.config(self.params())

    def stride(self) -> float:
        return self.locate.stride if self.locate.stride is not None else self.scenario.walk.stride

    def override(self, seed: int | None = None, carrier: float | None = None) -> "RunConfig":
        data = self.model_dump(by_alias=True)
        if seed is not None:
            data["seed"] = seed
        if carrier is not None:
            data["waveform"]["carrier_freq"] = carrier
        return parse_config(data)


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise InvalidSpec("config must be a JSON object")
    if "schema" not in data:
        raise InvalidSpec(f"config must declare \"schema\": {SCHEMA_VERSION}")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise InvalidSpec(problems) from None


def load_config(path=None) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidSpec(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"config is not valid JSON: {exc}") from None
    return parse_config(data)
