"""Transmit waveform: an inaudible carrier with bursts of phase-modulated sync pulses.

Each cycle of ``cycle_period`` seconds carries the plain carrier for
``carrier_duration`` seconds followed by three pulses spaced ``pulse_spacing``
apart. Inside a pulse the carrier phase is advanced by
``pi * sin(pi * (t - start) / pulse_duration)``, which starts and ends at zero so
a slow phase tracker barely notices it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams
from .streams import SampleStream

PULSES_PER_CYCLE = 3

# Bandwidth estimate of one pulse, (24000 - 17000) / 460 ~= 15 concurrent carriers.
# Kept as the published figure; pi / pulse_duration alone gives ~449 rad/s.
PULSE_BANDWIDTH_HZ = 460.0
MAX_CONCURRENT_CARRIERS = 15

_REL_TOL = 1e-9


@dataclass(frozen=True)
class WaveformParams:
    carrier_freq: float = 19000.0
    sample_rate: float = 44100.0
    pulse_duration: float = 0.007
    carrier_duration: float = 0.16
    cycle_period: float = 0.25
    pulse_spacing: float = 0.03
    max_range: float = 85.0
    sound_speed: float = 340.0

    @property
    def sample_period(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def pulse_samples(self) -> int:
        """Template length in samples (truncated)."""
        return int(self.pulse_duration * self.sample_rate + 1e-9)

    def validate(self) -> "WaveformParams":
        problems = []
        if not 17000.0 <= self.carrier_freq <= 24000.0:
            problems.append(f"carrier_freq {self.carrier_freq} outside [17000, 24000] Hz")
        if not self.sample_rate > 2 * self.carrier_freq:
            problems.append("sample_rate must exceed twice the carrier frequency")
        if not math.isclose(self.carrier_duration, self.cycle_period - PULSES_PER_CYCLE * self.pulse_spacing,
                            rel_tol=_REL_TOL, abs_tol=1e-12):
            problems.append("carrier_duration must equal cycle_period - 3 * pulse_spacing")
        if not self.pulse_spacing > self.pulse_duration:
            problems.append("pulse_spacing must exceed pulse_duration")
        if self.carrier_duration <= 0:
            problems.append("carrier_duration must be positive")
        if self.sound_speed * self.cycle_period < self.max_range * (1 - _REL_TOL):
            problems.append("sound_speed * cycle_period must be at least max_range")
        if min(self.pulse_duration, self.cycle_period, self.sound_speed, self.max_range) <= 0:
            problems.append("durations, speed and range must be positive")
        if problems:
            raise InvalidParams("; ".join(problems))
        return self

    def with_carrier(self, carrier_freq: float) -> "WaveformParams":
        return WaveformParams(carrier_freq, self.sample_rate, self.pulse_duration, self.carrier_duration,
                              self.cycle_period, self.pulse_spacing, self.max_range, self.sound_speed)


@dataclass(frozen=True)
class PulseSchedule:
    starts: tuple[float, ...]
    cycle_period: float
    pulses_per_cycle: int = PULSES_PER_CYCLE

    def __len__(self) -> int:
        return len(self.starts)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.starts, dtype=float)


def build_pulse_schedule(params: WaveformParams, duration: float, start_time: float = 0.0) -> PulseSchedule:
    """All pulse start times in ``[start_time, start_time + duration)``."""
    params.validate()
    if duration < 0:
        raise InvalidParams("duration must be non-negative")
    stop = start_time + duration
    first_cycle = max(0, math.floor(start_time / params.cycle_period) - 1)
    starts = []
    k = first_cycle
    while True:
        base = k * params.cycle_period + params.carrier_duration
        if base >= stop:
            break
        for j in range(PULSES_PER_CYCLE):
            tau = base + j * params.pulse_spacing
            if start_time <= tau < stop:
                starts.append(tau)
        k += 1
    return PulseSchedule(tuple(starts), params.cycle_period)


def pulse_phase(params: WaveformParams, schedule: PulseSchedule, t) -> np.ndarray:
    """Phase offset relative to the bare carrier at times ``t`` (0 outside pulses)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    order = None
    if t.size > 1 and np.any(np.diff(t) < 0):
        order = np.argsort(t, kind="stable")
        t = t[order]
    out = np.zeros_like(t)
    tp = params.pulse_duration
    starts = schedule.as_array()
    if t.size:
        starts = starts[(starts + tp >= t[0]) & (starts <= t[-1])]
    for tau in starts:
        i0 = np.searchsorted(t, tau, side="left")
        i1 = np.searchsorted(t, tau + tp, side="right")
        out[i0:i1] = math.pi * np.sin(math.pi * (t[i0:i1] - tau) / tp)
    if order is not None:
        unsorted = np.empty_like(out)
        unsorted[order] = out
        out = unsorted
    return out


def carrier_cycles(freq: float, sample_rate: float, n: np.ndarray, start_time: float = 0.0) -> np.ndarray:
    """Fractional carrier cycles ``freq * t mod 1`` on the sample grid, without large-argument loss."""
    base = math.fmod(freq * start_time, 1.0)
    n = np.asarray(n, dtype=np.int64)
    if float(freq).is_integer() and float(sample_rate).is_integer() and freq < 2**31 and sample_rate < 2**31:
        # exact: (freq * n mod rate) / rate in integer arithmetic
        f, r = int(freq), int(sample_rate)
        return np.mod(np.mod(n, r) * f % r / r + base, 1.0)
    step = freq / sample_rate
    whole = np.floor(step)
    frac_step = step - whole
    # n * frac_step reduced in two halves keeps the product below 2**26 cycles for hours of audio.
    hi, lo = np.divmod(n, 1 << 20)
    cyc = np.mod(np.mod(hi * ((1 << 20) * frac_step % 1.0), 1.0) + lo * frac_step + base, 1.0)
    return cyc


def synthesize(params: WaveformParams, schedule: PulseSchedule, duration: float,
               start_time: float = 0.0) -> SampleStream:
    """Sample the transmit waveform over ``[start_time, start_time + duration)``."""
    params.validate()
    if schedule.cycle_period != params.cycle_period:
        raise InvalidParams("schedule was built for a different cycle period")
    n_samples = int(round(duration * params.sample_rate))
    n = np.arange(n_samples)
    t = start_time + n / params.sample_rate
    phase = 2 * math.pi * carrier_cycles(params.carrier_freq, params.sample_rate, n, start_time)
    phase = phase + pulse_phase(params, schedule, t)
    return SampleStream(np.cos(phase), params.sample_rate, start_time)


def transmit(params: WaveformParams, duration: float, start_time: float = 0.0) -> SampleStream:
    """Schedule and synthesize in one call."""
    lead = params.cycle_period
    schedule = build_pulse_schedule(params, duration + 2 * lead, max(0.0, start_time - lead))
    return synthesize(params, schedule, duration, start_time)
