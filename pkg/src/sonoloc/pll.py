"""Second-order software PLL that turns carrier phase into displacement.

Per sample the loop multiplies the input by ``gamma1 = -2 sin(carrier + phi_hat)``,
low-pass filters the product into the phase error ``phi_e ~ sin(phi - phi_hat)``,
and runs a proportional-plus-integrator loop filter:
``gamma2 = k1 * phi_e``, ``gamma3 += k2 * phi_e``, ``phi_hat += gamma2 + gamma3``.
With ``k2 = 0`` it is a first-order loop.

``phi_hat`` is kept relative to the nominal carrier and never wrapped, so the
track is already unwrapped. A received carrier ``cos(2 pi f t + phi)`` with
``phi = -2 pi f l / v_a`` gives displacement ``l1 - l2 = v_a / (2 pi f) (phi2 - phi1)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numba
import numpy as np

from .errors import InsufficientInput, InvalidParams, NotConverged, OutOfRange
from .streams import DisplacementSeries, SampleStream

TWO_PI = 2.0 * math.pi

# Orientation calibration factors for the default handset pose.
FORWARD_FACTOR = 1.22
BACKWARD_FACTOR = 1.69

LOCK_THRESHOLD = 0.5

# Frozen by scripts/tune_pll.py: natural frequency 60 rad/s, damping 0.5 at 44.1 kHz.
DEFAULT_NATURAL_FREQ = 60.0
DEFAULT_DAMPING = 0.5


def loop_gains(natural_freq: float, damping: float, sample_rate: float) -> tuple[float, float]:
    """Per-sample ``(k1, k2)`` for a unit-amplitude loop with the given ``wn`` (rad/s) and damping."""
    if not natural_freq > 0 or not damping > 0 or not sample_rate > 0:
        raise InvalidParams("natural frequency, damping and sample rate must be positive")
    return 2.0 * damping * natural_freq / sample_rate, (natural_freq / sample_rate) ** 2


DEFAULT_K1, DEFAULT_K2 = loop_gains(DEFAULT_NATURAL_FREQ, DEFAULT_DAMPING, 44100.0)


class Calibration(str, Enum):
    NONE = "none"
    FORWARD = "forward"
    BACKWARD = "backward"
    AUTO = "auto"


@dataclass(frozen=True)
class PllConfig:
    k1: float = DEFAULT_K1
    k2: float = DEFAULT_K2
    carrier_freq: float = 19000.0
    sample_rate: float = 44100.0
    lpf_cutoff: float = 2000.0
    freq_offset: float = 0.0
    max_slew_hz: float = 500.0
    lock_time_constant: float = 0.050
    lock_prefilter: float = 100.0
    sound_speed: float = 340.0

    def __post_init__(self):
        if not self.k1 > 0:
            raise InvalidParams("k1 must be positive")
        if self.k2 < 0:
            raise InvalidParams("k2 must be non-negative")
        if not 0 < self.lpf_cutoff < self.sample_rate / 2:
            raise InvalidParams("lpf_cutoff must lie inside (0, Nyquist)")

    @property
    def sample_period(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def lpf_alpha(self) -> float:
        return 1.0 - math.exp(-TWO_PI * self.lpf_cutoff / self.sample_rate)

    @property
    def lock_pre_alpha(self) -> float:
        return 1.0 - math.exp(-TWO_PI * self.lock_prefilter / self.sample_rate)

    @property
    def lock_alpha(self) -> float:
        return 1.0 - math.exp(-1.0 / (self.lock_time_constant * self.sample_rate))

    @property
    def carrier_step(self) -> float:
        """DDS phase increment per sample, including any calibrated transmitter offset."""
        return TWO_PI * (self.carrier_freq + self.freq_offset) / self.sample_rate

    @property
    def max_gamma3(self) -> float:
        return TWO_PI * self.max_slew_hz / self.sample_rate

    @property
    def metres_per_radian(self) -> float:
        return self.sound_speed / (TWO_PI * self.carrier_freq)

    def first_order(self, k1: float) -> "PllConfig":
        return replace(self, k1=k1, k2=0.0)


@dataclass
class PllState:
    phi_hat: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    gamma3: float = 0.0
    lpf_state: float = 0.0
    carrier_phase: float = 0.0
    lock: float = 0.0
    lock_pre: float = 0.0
    n: int = 0


def pll_step(state: PllState, sample: float, config: PllConfig) -> tuple[PllState, float]:
    """Advance the loop by one input sample; returns the new state and ``phi_hat``."""
    theta = state.carrier_phase + state.phi_hat
    gamma1 = -2.0 * math.sin(theta)
    lpf = state.lpf_state + config.lpf_alpha * (sample * gamma1 - state.lpf_state)
    phi_e = lpf
    gamma2 = config.k1 * phi_e
    lim = config.max_gamma3
    gamma3 = min(max(state.gamma3 + config.k2 * phi_e, -lim), lim)
    phi_hat = state.phi_hat + gamma2 + gamma3
    carrier = state.carrier_phase + config.carrier_step
    if carrier >= TWO_PI:
        carrier -= TWO_PI
    lock_pre = state.lock_pre + config.lock_pre_alpha * (phi_e - state.lock_pre)
    lock = state.lock + config.lock_alpha * (abs(lock_pre) - state.lock)
    new = PllState(phi_hat, gamma1, gamma2, gamma3, lpf, carrier, lock, lock_pre, state.n + 1)
    return new, phi_hat


@numba.njit(cache=True)
def _track_kernel(x, k1, k2, lpf_a, pre_a, lock_a, step, lim, st, phi_out, err_out, lock_out, g3_out):
    phi_hat = st[0]
    g3 = st[3]
    lpf = st[4]
    carrier = st[5]
    lock = st[6]
    pre = st[7]
    two_pi = 2.0 * math.pi
    for i in range(x.shape[0]):
        gamma1 = -2.0 * math.sin(carrier + phi_hat)
        lpf = lpf + lpf_a * (x[i] * gamma1 - lpf)
        g2 = k1 * lpf
        g3 = g3 + k2 * lpf
        if g3 > lim:
            g3 = lim
        elif g3 < -lim:
            g3 = -lim
        phi_hat = phi_hat + g2 + g3
        carrier = carrier + step
        if carrier >= two_pi:
            carrier -= two_pi
        pre = pre + pre_a * (lpf - pre)
        lock = lock + lock_a * (abs(pre) - lock)
        phi_out[i] = phi_hat
        err_out[i] = lpf
        lock_out[i] = lock
        g3_out[i] = g3
    st[0] = phi_hat
    st[1] = gamma1 if x.shape[0] else st[1]
    st[2] = k1 * lpf
    st[3] = g3
    st[4] = lpf
    st[5] = carrier
    st[6] = lock
    st[7] = pre


@dataclass(frozen=True)
class PhaseTrack:
    """Tracked phase offset (rad, unwrapped) per sample with loop diagnostics."""

    t: np.ndarray
    phi: np.ndarray
    lock: np.ndarray
    phase_error: np.ndarray
    gamma3: np.ndarray
    config: PllConfig = field(default_factory=PllConfig)

    @property
    def sample_rate(self) -> float:
        return self.config.sample_rate

    def phase_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.t.size == 0 or np.any(t < self.t[0] - 1e-12) or np.any(t > self.t[-1] + 1e-12):
            raise OutOfRange("requested time outside the phase track")
        return np.interp(t, self.t, self.phi)

    def lock_at(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=float), self.t, self.lock)

    def displacement(self) -> np.ndarray:
        """Cumulative displacement (m) since the first sample, positive toward the speaker."""
        return (self.phi - self.phi[0]) * self.config.metres_per_radian

    def write_csv(self, path, decimate: int = 1) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "phi_hat", "lock_metric"])
            for i in range(0, self.t.size, max(1, decimate)):
                w.writerow([f"{self.t[i]:.6f}", f"{self.phi[i]:.9f}", f"{self.lock[i]:.6f}"])
        return path

    @classmethod
    def read_csv(cls, path, config: PllConfig | None = None) -> "PhaseTrack":
        """Load a track written by ``write_csv``; loop diagnostics other than lock come back as zeros."""
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        if data.shape[0] < 2 or data.shape[1] < 3:
            raise InsufficientInput("phase track CSV needs at least two rows of t, phi_hat, lock_metric")
        t, phi, lock = data[:, 0], data[:, 1], data[:, 2]
        zeros = np.zeros_like(t)
        return cls(t, phi, lock, zeros, zeros, config or PllConfig())


class PhaseTracker:
    """Stateful per-channel tracker; feed it consecutive blocks."""

    def __init__(self, config: PllConfig, start_time: float = 0.0):
        self.config = config
        self.state = np.zeros(8)
        self.state[5] = math.fmod(config.carrier_step * round(start_time * config.sample_rate), TWO_PI)
        self._n = int(round(start_time * config.sample_rate))

    def process(self, block: np.ndarray):
        c = self.config
        x = np.ascontiguousarray(block, dtype=np.float64)
        n = x.size
        phi = np.empty(n)
        err = np.empty(n)
        lock = np.empty(n)
        g3 = np.empty(n)
        _track_kernel(x, c.k1, c.k2, c.lpf_alpha, c.lock_pre_alpha, c.lock_alpha, c.carrier_step, c.max_gamma3,
                      self.state, phi, err, lock, g3)
        self._n += n
        return phi, err, lock, g3


def track(stream: SampleStream, config: PllConfig | None = None) -> PhaseTrack:
    """Run the loop over a whole (pre-processed) stream."""
    config = config or PllConfig()
    if stream.sample_rate != config.sample_rate:
        config = replace(config, sample_rate=stream.sample_rate)
    tracker = PhaseTracker(config, stream.start_time)
    phi, err, lock, g3 = tracker.process(stream.samples)
    return PhaseTrack(stream.times, phi, lock, err, g3, config)


def phase_to_displacement(delta_phi, config: PllConfig | None = None,
                          calibration: Calibration | str = Calibration.NONE):
    """``v_a / (2 pi f) * delta_phi``, optionally scaled by the orientation factors."""
    config = config or PllConfig()
    cal = Calibration(calibration)
    d = np.asarray(delta_phi, dtype=float) * config.metres_per_radian
    if cal is Calibration.FORWARD:
        d = d * FORWARD_FACTOR
    elif cal is Calibration.BACKWARD:
        d = d * BACKWARD_FACTOR
    elif cal is Calibration.AUTO:
        d = np.where(d > 0, d * FORWARD_FACTOR, d * BACKWARD_FACTOR)
    return float(d) if np.ndim(d) == 0 else d


def displacements_at_steps(track_: PhaseTrack, step_times, config: PllConfig | None = None,
                           calibration: Calibration | str = Calibration.NONE,
                           gate_lock: float | None = LOCK_THRESHOLD) -> DisplacementSeries:
    """Per-step displacements from the phase track sampled at the heel strikes.

    Steps during which the lock metric exceeded ``gate_lock`` come back as NaN
    so the solvers drop them.
    """
    config = config or track_.config
    times = np.asarray(getattr(step_times, "step_times", step_times), dtype=float)
    if times.size < 2:
        raise InvalidParams("need at least two step instants")
    phi = track_.phase_at(times)
    d = np.asarray(phase_to_displacement(np.diff(phi), config, calibration), dtype=float)
    if gate_lock is not None:
        i0 = np.searchsorted(track_.t, times[:-1])
        i1 = np.searchsorted(track_.t, times[1:], side="right")
        for j, (a, b) in enumerate(zip(i0, i1)):
            if b > a and np.max(track_.lock[a:b]) > gate_lock:
                d[j] = np.nan
    return DisplacementSeries(d, times)


def estimate_freq_offset(track_: PhaseTrack, static_window: tuple[float, float],
                         lock_threshold: float = LOCK_THRESHOLD) -> float:
    """Transmitter frequency offset (Hz) from the integrator branch over a static window.

    The integrator settles to the per-sample phase slope, so its mean divided
    by ``2 pi Ts`` is the residual carrier offset seen by the loop.
    """
    t0, t1 = static_window
    if t1 - t0 < 2.0 - 1e-9:
        raise InvalidParams("static window must span at least 2 s")
    i0 = np.searchsorted(track_.t, t0)
    i1 = np.searchsorted(track_.t, t1, side="right")
    if i0 < 0 or i1 > track_.t.size or track_.t.size == 0 or t0 < track_.t[0] - 1e-9 or t1 > track_.t[-1] + 1e-9:
        raise OutOfRange("static window outside the phase track")
    if np.max(track_.lock[i0:i1]) > lock_threshold:
        raise NotConverged("loop not locked during the static window")
    slope = float(np.mean(track_.gamma3[i0:i1]))
    return slope / (TWO_PI * track_.config.sample_period)


def phase_slope_offset(track_: PhaseTrack, static_window: tuple[float, float]) -> float:
    """Same estimate from a least-squares fit of the phase ramp (cross-check)."""
    t0, t1 = static_window
    m = (track_.t >= t0) & (track_.t <= t1)
    slope = np.polyfit(track_.t[m] - t0, track_.phi[m], 1)[0]
    return float(slope / TWO_PI)


def count_slips(error: np.ndarray, sample_rate: float, smooth: float = 0.02) -> int:
    """Number of 2-pi jumps in a phase-error series (tracked minus truth).

    The series is averaged over ``smooth`` seconds, then each distinct integer
    cycle level it settles on counts as one slip.
    """
    w = max(1, int(round(smooth * sample_rate)))
    e = np.asarray(error, dtype=float)
    if e.size < w:
        return 0
    c = np.cumsum(np.concatenate([[0.0], e]))
    avg = (c[w:] - c[:-w]) / w
    avg = avg[::w]
    level = 0
    ref = avg[0]
    slips = 0
    for v in avg[1:]:
        k = (v - ref) / TWO_PI
        if abs(k - level) > 0.75:
            new = int(round(k))
            slips += abs(new - level)
            level = new
    return slips
