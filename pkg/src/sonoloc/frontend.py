"""Receiver front end: channel-selecting band-pass filter and automatic gain control."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import signal

from .errors import InvalidSpec
from .streams import SampleStream


@dataclass(frozen=True)
class BpfSpec:
    center: float = 19000.0
    half_width: float = 500.0
    stop_attenuation: float = 40.0
    taps: int = 255

    def check(self, sample_rate: float) -> "BpfSpec":
        if self.center - self.half_width <= 0:
            raise InvalidSpec("passband must stay above 0 Hz")
        if self.center + self.half_width >= sample_rate / 2:
            raise InvalidSpec("passband must stay below Nyquist")
        if self.taps < 3 or self.taps % 2 == 0:
            raise InvalidSpec("taps must be odd and >= 3 for an integer group delay")
        if self.half_width <= 0 or self.stop_attenuation <= 0:
            raise InvalidSpec("half_width and stop_attenuation must be positive")
        return self

    @property
    def group_delay(self) -> int:
        """Group delay of the causal filter, in samples."""
        return (self.taps - 1) // 2

    def stopband_edge(self) -> float:
        """Offset from the centre beyond which ``stop_attenuation`` is guaranteed."""
        return 2.0 * self.half_width


def design_band_pass(spec: BpfSpec, sample_rate: float) -> np.ndarray:
    """Linear-phase Kaiser-window FIR; verifies the stopband at design time."""
    spec.check(sample_rate)
    beta = signal.kaiser_beta(spec.stop_attenuation + 6.0)
    lo = spec.center - spec.half_width
    hi = spec.center + spec.half_width
    taps = signal.firwin(spec.taps, [lo, hi], pass_zero=False, window=("kaiser", beta), fs=sample_rate)
    # unit gain at the centre frequency
    _, h = signal.freqz(taps, worN=[spec.center], fs=sample_rate)
    taps = taps / abs(h[0])
    worst = stopband_attenuation(taps, spec, sample_rate)
    if worst < spec.stop_attenuation:
        raise InvalidSpec(f"{spec.taps} taps reach only {worst:.1f} dB beyond +-{spec.stopband_edge():.0f} Hz; "
                          f"{spec.stop_attenuation:.1f} dB requested")
    return taps


def stopband_attenuation(taps: np.ndarray, spec: BpfSpec, sample_rate: float, n_grid: int = 8192) -> float:
    """Minimum attenuation (dB) over frequencies further than the stopband edge from the centre."""
    f, h = signal.freqz(taps, worN=n_grid, fs=sample_rate)
    mask = np.abs(f - spec.center) >= spec.stopband_edge()
    return float(-20 * np.log10(np.max(np.abs(h[mask])) + 1e-300))


def band_pass(stream: SampleStream, spec: BpfSpec) -> SampleStream:
    """Filter with the group delay removed, so output timestamps line up with the input."""
    taps = design_band_pass(spec, stream.sample_rate)
    y = signal.oaconvolve(stream.samples, taps, mode="full")
    gd = spec.group_delay
    return stream.with_samples(y[gd:gd + len(stream)])


class BandPass:
    """Causal streaming form of :func:`band_pass`; output lags by ``group_delay`` samples."""

    def __init__(self, spec: BpfSpec, sample_rate: float):
        self.spec = spec
        self.taps = design_band_pass(spec, sample_rate)
        self._zi = np.zeros(self.taps.size - 1)

    @property
    def group_delay(self) -> int:
        return self.spec.group_delay

    def process(self, block: np.ndarray) -> np.ndarray:
        y, self._zi = signal.lfilter(self.taps, 1.0, np.asarray(block, dtype=float), zi=self._zi)
        return y


TARGET_RMS = 1.0 / math.sqrt(2.0)
SILENCE_RMS = 1e-4


@numba.njit(cache=True)
def _agc_kernel(x, window, max_step, target, silence, state):
    # state: [gain, sum_sq, filled, ring position] ; ring buffer holds the last `window` squares
    n = x.shape[0]
    y = np.empty(n)
    gains = np.empty(n)
    ring = state[4:]
    g = state[0]
    acc = state[1]
    filled = int(state[2])
    pos = int(state[3])
    for i in range(n):
        sq = x[i] * x[i]
        if filled == window:
            acc -= ring[pos]
        else:
            filled += 1
        ring[pos] = sq
        acc += sq
        pos += 1
        if pos == window:
            pos = 0
        if acc < 0.0:
            acc = 0.0
        rms = math.sqrt(acc / filled)
        if rms >= silence:
            want = target / rms
            # instant attack, slew-limited release
            if g <= 0.0 or want <= g:
                g = want
            elif want > g * max_step:
                g = g * max_step
            else:
                g = want
        gains[i] = g
        y[i] = (g if g > 0.0 else 1.0) * x[i]
    state[0] = g
    state[1] = acc
    state[2] = filled
    state[3] = pos
    return y, gains


class Agc:
    """Sliding-RMS gain control; cuts gain at once, raises it at most ``slew_db_per_ms``.

    Holds its gain through silence.
    """

    def __init__(self, sample_rate: float, window: float = 0.010, slew_db_per_ms: float = 3.0,
                 target_rms: float = TARGET_RMS, silence_rms: float = SILENCE_RMS):
        if window <= 0:
            raise InvalidSpec("AGC window must be positive")
        self.window_samples = max(1, int(round(window * sample_rate)))
        self.max_step = 10.0 ** (slew_db_per_ms / 20.0 / (sample_rate / 1000.0))
        self.target_rms = target_rms
        self.silence_rms = silence_rms
        self._state = np.zeros(4 + self.window_samples)
        self.last_gains = np.zeros(0)

    @property
    def gain(self) -> float:
        return float(self._state[0])

    def process(self, block: np.ndarray) -> np.ndarray:
        y, gains = _agc_kernel(np.ascontiguousarray(block, dtype=np.float64), self.window_samples,
                               self.max_step, self.target_rms, self.silence_rms, self._state)
        self.last_gains = gains
        return y


def agc(stream: SampleStream, window: float = 0.010, slew_db_per_ms: float = 3.0) -> SampleStream:
    """Normalize to unit sinusoid amplitude (RMS 1/sqrt(2)) over a sliding ``window``."""
    if window <= 0:
        raise InvalidSpec("AGC window must be positive")
    ctl = Agc(stream.sample_rate, window, slew_db_per_ms)
    return stream.with_samples(ctl.process(stream.samples))


def preprocess(stream: SampleStream, carrier_freq: float, spec: BpfSpec | None = None,
               agc_window: float = 0.010) -> SampleStream:
    """Band-pass around ``carrier_freq`` then AGC."""
    spec = spec or BpfSpec(center=carrier_freq)
    if spec.center != carrier_freq:
        spec = BpfSpec(carrier_freq, spec.half_width, spec.stop_attenuation, spec.taps)
    return agc(band_pass(stream, spec), agc_window)
