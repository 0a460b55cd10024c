"""Acoustic channel from a fixed speaker to a walking receiver.

This is the ground truth the rest of the pipeline is checked against. The
receiver follows a chain of step points with continuous velocity (cubic
Hermite between heel strikes) and stands still before the first and after
the last one. Coordinates are segment-relative: the walk starts at ``start_point``
heading along +X, the speaker sits at ``(X, Y)`` on the ground plane and ``h``
metres above the receiver.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .errors import InsufficientInput, InvalidParams, OutOfRange
from .streams import DisplacementSeries, SampleStream


@dataclass(frozen=True)
class StepTrace:
    """Heel-strike instants and the turn list of a walk.

    ``step_times[j]`` is when the walker stands on step point ``j``; the first
    point is ``start_point``. ``segment_turns`` holds ``(stride_index, heading)``
    pairs: from that stride on the walker heads along ``heading`` radians,
    measured from the first segment's direction. ``velocities`` optionally pins
    the ground velocity at every step point; otherwise it is estimated.
    """

    step_times: tuple[float, ...]
    stride: float
    segment_turns: tuple[tuple[int, float], ...] = ()
    start_point: tuple[float, float] = (0.0, 0.0)
    velocities: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        times = tuple(float(t) for t in self.step_times)
        if not times:
            raise InvalidParams("trajectory needs at least one step instant")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidParams("step_times must be strictly increasing")
        if not self.stride > 0:
            raise InvalidParams("stride must be positive")
        turns = tuple(sorted((int(i), float(z)) for i, z in self.segment_turns))
        object.__setattr__(self, "step_times", times)
        object.__setattr__(self, "segment_turns", turns)
        object.__setattr__(self, "start_point", tuple(float(v) for v in self.start_point))
        if self.velocities is not None:
            vel = tuple((float(a), float(b)) for a, b in self.velocities)
            if len(vel) != len(times):
                raise InvalidParams("velocities need one entry per step point")
            object.__setattr__(self, "velocities", vel)

    @property
    def n_points(self) -> int:
        return len(self.step_times)

    @property
    def n_strides(self) -> int:
        return len(self.step_times) - 1

    def heading(self, stride_index: int) -> float:
        zeta = 0.0
        for idx, z in self.segment_turns:
            if idx <= stride_index:
                zeta = z
            else:
                break
        return zeta

    def headings(self) -> np.ndarray:
        return np.array([self.heading(j) for j in range(self.n_strides)])

    def points(self) -> np.ndarray:
        """Step point coordinates, shape ``(n_points, 2)``."""
        h = self.headings()
        steps = self.stride * np.column_stack([np.cos(h), np.sin(h)]) if h.size else np.zeros((0, 2))
        pts = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)]) + np.asarray(self.start_point)
        return pts

    def point_velocities(self) -> np.ndarray:
        """Velocity at each step point: as given, else zero at both ends and central difference between."""
        if self.velocities is not None:
            return np.array(self.velocities, dtype=float).reshape(-1, 2)
        pts = self.points()
        times = np.asarray(self.step_times)
        vel = np.zeros_like(pts)
        if pts.shape[0] > 2:
            vel[1:-1] = (pts[2:] - pts[:-2]) / (times[2:] - times[:-2])[:, None]
        return vel

    def position(self, t) -> np.ndarray:
        """Receiver ground-plane position at ``t`` (clamped outside the walk).

        Between heel strikes the path is a cubic Hermite segment, so velocity is
        continuous and the receiver passes every step point at its step instant.
        """
        t = np.asarray(t, dtype=float)
        pts = self.points()
        times = np.asarray(self.step_times)
        if pts.shape[0] == 1:
            return np.broadcast_to(pts[0], t.shape + (2,)).copy()
        vel = self.point_velocities()
        tc = np.clip(t, times[0], times[-1])
        j = np.clip(np.searchsorted(times, tc, side="right") - 1, 0, times.size - 2)
        dt = times[j + 1] - times[j]
        u = ((tc - times[j]) / dt)[..., None]
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        return (h00 * pts[j] + h10 * dt[..., None] * vel[j]
                + h01 * pts[j + 1] + h11 * dt[..., None] * vel[j + 1])

    def segments(self) -> list[tuple[int, int, float]]:
        """Straight runs as ``(first_stride, n_strides, heading)``."""
        out = []
        h = self.headings()
        j = 0
        while j < h.size:
            k = j
            while k + 1 < h.size and h[k + 1] == h[j]:
                k += 1
            out.append((j, k - j + 1, float(h[j])))
            j = k + 1
        return out


@dataclass(frozen=True)
class Scenario:
    """Speaker position ``(X, Y, h)`` plus the receiver's walk."""

    speaker: tuple[float, float, float]
    trajectory: StepTrace
    seed: int = 0
    duration: float | None = None

    def __post_init__(self):
        sp = tuple(float(v) for v in self.speaker)
        if len(sp) == 2:
            sp = sp + (0.0,)
        if len(sp) != 3:
            raise InvalidParams("speaker must be (X, Y) or (X, Y, h)")
        if sp[2] < 0:
            raise InvalidParams("speaker height h must be non-negative")
        object.__setattr__(self, "speaker", sp)

    @property
    def height(self) -> float:
        return self.speaker[2]

    @property
    def end_time(self) -> float:
        return self.duration if self.duration is not None else self.trajectory.step_times[-1]

    @property
    def along_track(self) -> float:
        """Signed offset ``x`` of the start point from the perpendicular foot (``x = -X``)."""
        return -(self.speaker[0] - self.trajectory.start_point[0])

    @property
    def slant_offset(self) -> float:
        """Distance ``y`` from the speaker to the first walking line."""
        return math.hypot(self.speaker[1] - self.trajectory.start_point[1], self.speaker[2])


@dataclass(frozen=True)
class EchoPath:
    """A reflected copy of the signal.

    With ``image`` unset the echo trails the direct path by a fixed
    ``extra_delay``. With ``image`` set, the echo comes from that virtual
    source (mirror of the speaker in a wall) and ``extra_delay`` adds on top.
    """

    gain: float
    extra_delay: float = 0.0
    image: tuple[float, float, float] | None = None

    def __post_init__(self):
        if not 0 < self.gain <= 1:
            raise InvalidParams("echo gain must be in (0, 1]")
        if self.image is None and not self.extra_delay > 0:
            raise InvalidParams("fixed echoes need a positive extra delay")
        if self.extra_delay < 0:
            raise InvalidParams("extra delay must be non-negative")
        if self.image is not None:
            img = tuple(float(v) for v in self.image)
            object.__setattr__(self, "image", img + (0.0,) * (3 - len(img)))


@dataclass(frozen=True)
class ChannelModel:
    snr_db: float | None = None
    paths: tuple[EchoPath, ...] = ()
    freq_offset: float = 0.0
    attenuation_exponent: float = 1.0
    nominal_freq: float = 19000.0
    sound_speed: float = 340.0
    noise_bandwidth: float = 1000.0
    reference_distance: float = 1.0
    interp_taps: int = 96
    interp_beta: float = 7.0

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        if self.interp_taps < 4 or self.interp_taps % 2:
            raise InvalidParams("interp_taps must be an even number >= 4")
        if self.noise_bandwidth <= 0 or self.sound_speed <= 0:
            raise InvalidParams("noise_bandwidth and sound_speed must be positive")

    @property
    def clock_ratio(self) -> float:
        return (self.nominal_freq + self.freq_offset) / self.nominal_freq


def _distance_to(source, pos: np.ndarray) -> np.ndarray:
    dx = pos[..., 0] - source[0]
    dy = pos[..., 1] - source[1]
    return np.sqrt(dx * dx + dy * dy + source[2] ** 2)


def distance_profile(scenario: Scenario, t):
    """Slant distance speaker -> receiver at ``t`` (scalar or array)."""
    arr = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > scenario.end_time + 1e-12):
        raise OutOfRange(f"time outside trajectory span [0, {scenario.end_time}]")
    d = _distance_to(scenario.speaker, scenario.trajectory.position(arr))
    return float(d) if np.ndim(t) == 0 else d


def step_distances(scenario: Scenario) -> np.ndarray:
    return _distance_to(scenario.speaker, scenario.trajectory.points())


def ideal_displacements(scenario: Scenario) -> DisplacementSeries:
    """Exact per-step displacements ``l[i] - l[i+1]`` from geometry."""
    if scenario.trajectory.n_points < 2:
        raise InvalidParams("need at least two step points")
    dist = step_distances(scenario)
    return DisplacementSeries(dist[:-1] - dist[1:], np.asarray(scenario.trajectory.step_times))


_TABLE_PHASES = 2048


def kaiser_sinc_table(taps: int, beta: float, phases: int = _TABLE_PHASES) -> np.ndarray:
    """Rows of windowed-sinc coefficients for fractional offsets ``mu = r / phases``.

    Row ``r`` weights input samples ``i + k`` for ``k = -taps/2 + 1 .. taps/2``.
    """
    half = taps // 2
    k = np.arange(-half + 1, half + 1)
    mu = np.arange(phases + 1)[:, None] / phases
    tau = k[None, :] - mu
    win = np.i0(beta * np.sqrt(np.clip(1.0 - (tau / half) ** 2, 0.0, None))) / np.i0(beta)
    return np.sinc(tau) * win


@numba.njit(cache=True)
def _interp_kernel(x, pos, table, out, gain):
    n_phase = table.shape[0] - 1
    taps = table.shape[1]
    half = taps // 2
    n_x = x.shape[0]
    for n in range(pos.shape[0]):
        p = pos[n]
        i = math.floor(p)
        mu = (p - i) * n_phase
        r = int(mu)
        if r >= n_phase:
            r = n_phase - 1
        w = mu - r
        acc = 0.0
        base = int(i) - half + 1
        for k in range(taps):
            j = base + k
            if j < 0 or j >= n_x:
                continue
            c = table[r, k] + w * (table[r + 1, k] - table[r, k])
            acc += c * x[j]
        out[n] += gain[n] * acc


def fractional_delay(x: np.ndarray, positions: np.ndarray, gain: np.ndarray, out: np.ndarray,
                     taps: int = 96, beta: float = 7.0) -> None:
    """Accumulate ``gain * x(positions)`` into ``out`` by windowed-sinc interpolation."""
    table = kaiser_sinc_table(taps, beta)
    _interp_kernel(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(positions, dtype=np.float64),
                   table, out, np.ascontiguousarray(gain, dtype=np.float64))


def propagate(tx: SampleStream, scenario: Scenario, model: ChannelModel,
              start_time: float | None = None, duration: float | None = None) -> SampleStream:
    """Received signal on the receiver's sample grid.

    By default the output covers the same span as ``tx``. The speaker is
    silent before its first sample; asking for output that would need
    transmit samples past the end of ``tx`` raises ``InsufficientInput``.
    """
    fs = tx.sample_rate
    t0 = tx.start_time if start_time is None else float(start_time)
    n_out = len(tx) if duration is None else int(round(duration * fs))
    t = t0 + np.arange(n_out) / fs
    pos = scenario.trajectory.position(t)
    ratio = model.clock_ratio
    va = model.sound_speed
    sources = [(scenario.speaker, 1.0, 0.0)]
    for p in model.paths:
        sources.append((p.image if p.image is not None else scenario.speaker, p.gain, p.extra_delay))

    out = np.zeros(n_out)
    last_needed = -np.inf
    for src, g, extra in sources:
        dist = _distance_to(src, pos)
        delay = dist / va + extra
        src_time = ratio * (t - delay)
        idx = (src_time - tx.start_time) * fs
        if n_out:
            last_needed = max(last_needed, float(idx.max()))
        amp = g * (model.reference_distance / np.maximum(dist, 0.1)) ** model.attenuation_exponent
        fractional_delay(tx.samples, idx, amp, out, model.interp_taps, model.interp_beta)
    if n_out and last_needed > len(tx) - 1 + 1e-6:
        raise InsufficientInput(
            f"transmit stream ends {(last_needed - len(tx) + 1) / fs:.4f} s too early for the requested span")

    if model.snr_db is not None and n_out:
        power = float(np.mean(out ** 2))
        inband = power / 10.0 ** (model.snr_db / 10.0)
        sigma = math.sqrt(inband * (fs / 2.0) / model.noise_bandwidth)
        rng = np.random.default_rng(scenario.seed)
        out = out + rng.normal(0.0, sigma, n_out)
    return SampleStream(out, fs, t0)


def received_phase(scenario: Scenario, model: ChannelModel, t, freq: float) -> np.ndarray:
    """Carrier phase of the direct path relative to a nominal ``freq`` oscillator at the receiver."""
    t = np.asarray(t, dtype=float)
    dist = _distance_to(scenario.speaker, scenario.trajectory.position(t))
    ratio = model.clock_ratio
    return 2 * math.pi * freq * ((ratio - 1.0) * t - ratio * dist / model.sound_speed)


def arrival_times(scenario: Scenario, model: ChannelModel, send_times, path: int = 0) -> np.ndarray:
    """Receiver-clock instants at which transmitter instants ``send_times`` arrive.

    ``path`` 0 is the direct path, ``k`` the k-th entry of ``model.paths``.
    Solves ``ratio * (t - dist(t) / v_a - extra) = send`` by fixed-point iteration.
    """
    send = np.asarray(send_times, dtype=float)
    if path == 0:
        src, extra = scenario.speaker, 0.0
    else:
        echo = model.paths[path - 1]
        src, extra = (echo.image if echo.image is not None else scenario.speaker), echo.extra_delay
    ratio = model.clock_ratio
    t = send / ratio
    for _ in range(50):
        nxt = send / ratio + _distance_to(src, scenario.trajectory.position(t)) / model.sound_speed + extra
        if np.all(np.abs(nxt - t) < 1e-13):
            t = nxt
            break
        t = nxt
    return t


def mix(streams: Sequence[SampleStream]) -> SampleStream:
    """Sum concurrent speakers on a shared sample grid."""
    if not streams:
        raise InvalidParams("nothing to mix")
    total = streams[0]
    for s in streams[1:]:
        total = total + s
    return total


# ---- trajectory builders ---------------------------------------------------

def static_trace(point=(0.0, 0.0), at: float = 0.0) -> StepTrace:
    return StepTrace((at,), stride=1.0, start_point=tuple(point))


def straight_walk(n_steps: int, stride: float, step_interval: float = 0.5, t0: float = 1.0,
                  ramp_steps: int = 3, turns: Sequence[tuple[int, float]] = (),
                  start_point=(0.0, 0.0)) -> StepTrace:
    """Walk of ``n_steps`` strides that eases in and out over ``ramp_steps`` strides.

    Speed follows a raised-cosine ramp from rest up to ``stride / step_interval``
    and back down, each ramp lasting ``2 * ramp_steps`` step intervals. Heel
    strikes fall where the distance walked reaches a whole number of strides.
    """
    if n_steps < 0:
        raise InvalidParams("n_steps must be non-negative")
    if not step_interval > 0 or ramp_steps < 0:
        raise InvalidParams("step_interval must be positive and ramp_steps non-negative")
    if n_steps == 0:
        return StepTrace((t0,), stride, tuple(turns), tuple(start_point))
    v = stride / step_interval
    total = n_steps * stride
    ramp = min(2.0 * ramp_steps * step_interval, total / v)
    targets = np.arange(n_steps + 1) * stride
    if ramp > 0:
        cruise = (total - v * ramp) / v
        end = 2.0 * ramp + cruise

        def speed_at(t):
            up = np.clip(t / ramp, 0.0, 1.0)
            down = np.clip((end - t) / ramp, 0.0, 1.0)
            return v * np.minimum((1 - np.cos(np.pi * up)) / 2, (1 - np.cos(np.pi * down)) / 2)

        t = np.linspace(0.0, end, max(2000, int(end * 2000)) + 1)
        spd = speed_at(t)
        dist = np.concatenate([[0.0], np.cumsum((spd[1:] + spd[:-1]) / 2 * np.diff(t))])
        dist *= total / dist[-1]
        times = np.interp(targets, dist, t)
        times[-1] = end
        speeds = speed_at(times) * (total / (v * (end - ramp)))
        speeds[0] = speeds[-1] = 0.0
    else:
        times = np.arange(n_steps + 1) * step_interval
        speeds = np.full(n_steps + 1, v)
        speeds[0] = speeds[-1] = 0.0
    base = StepTrace(tuple(t0 + times), stride, tuple(turns), tuple(start_point))
    h = base.headings()
    h_in = np.concatenate([[h[0]], h])
    h_out = np.concatenate([h, [h[-1]]])
    direction = np.column_stack([np.cos(h_in) + np.cos(h_out), np.sin(h_in) + np.sin(h_out)])
    norm = np.linalg.norm(direction, axis=1)
    direction = direction / np.where(norm > 0, norm, 1.0)[:, None]
    vel = direction * speeds[:, None]
    return StepTrace(base.step_times, stride, base.segment_turns, base.start_point,
                     tuple(map(tuple, vel)))


def back_and_forth(amplitude: float, cycles: int, period: float, t0: float = 1.0,
                   resolution: float = 0.01, heading: float = 0.0, start_point=(0.0, 0.0)) -> StepTrace:
    """Sinusoidal to-and-fro motion of ``amplitude`` metres, sampled every ``resolution`` metres."""
    m = int(round(amplitude / resolution))
    if m < 1 or abs(m * resolution - amplitude) > 1e-9:
        raise InvalidParams("amplitude must be a positive multiple of resolution")
    x = np.arange(m + 1) * resolution
    up = period / (2 * math.pi) * np.arccos(np.clip(1.0 - 2.0 * x / amplitude, -1.0, 1.0))
    times = [t0]
    turns = []
    for c in range(cycles):
        base = t0 + c * period
        times.extend(base + up[1:])
        turns.append((len(times) - 1, heading + math.pi))
        times.extend(base + period - up[::-1][1:])
        turns.append((len(times) - 1, heading))
    turns = [(0, heading)] + turns[:-1]
    return StepTrace(tuple(times), resolution, tuple(turns), tuple(start_point))


def write_trajectory_csv(scenario: Scenario, path, interval: float = 0.01) -> Path:
    """Columns ``time, x, y, distance`` sampled every ``interval`` seconds."""
    path = Path(path)
    n = int(math.floor(scenario.end_time / interval + 1e-9)) + 1
    t = np.arange(n) * interval
    pos = scenario.trajectory.position(t)
    dist = _distance_to(scenario.speaker, pos)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "x", "y", "distance"])
        for row in zip(t, pos[:, 0], pos[:, 1], dist):
            w.writerow([f"{v:.6f}" for v in row])
    return path
