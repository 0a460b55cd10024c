"""Arrival times of the synchronization pulses.

A matched score ``m`` correlates the received carrier with the pulse's phase
template, using the PLL's phase as the carrier reference. Periodic sums over
the pulse spacing (``m1``) and the cycle period (``m2``) lift weak or moving
signals above the noise; folding modulo the cycle (``m3``) separates
propagation paths for a static receiver.

Every detection reports the arrival of the *first* pulse of a cycle, whatever
level it was computed on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, signal

from .errors import EmptyCandidates, InsufficientInput, InvalidParams, NoDetection, WrongLevel
from .streams import SampleStream
from .waveform import WaveformParams, carrier_cycles

DETECTION_SIGMAS = 4.0
MAX_CANDIDATES = 8


class ScoreLevel(str, Enum):
    RAW = "m"
    M1 = "m1"
    M2 = "m2"
    M3 = "m3"


@dataclass(frozen=True)
class ScoreSeries:
    """Likelihood score per sample.

    ``centred`` marks series whose peaks sit on the middle pulse of a cycle
    (anything built from ``m1``). ``folded`` series are one cycle long and
    wrap around.
    """

    m: np.ndarray
    level: ScoreLevel
    start_time: float
    sample_rate: float
    centred: bool = False
    folded: bool = False

    def __post_init__(self):
        m = np.array(self.m, dtype=float, copy=True)
        if m.ndim != 1:
            raise InvalidParams("score must be 1-D")
        m.flags.writeable = False
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "level", ScoreLevel(self.level))

    def __len__(self) -> int:
        return self.m.size

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.m.size) / self.sample_rate

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "score", "level"])
            for t, v in zip(self.times, self.m):
                w.writerow([f"{t:.9f}", f"{v:.6f}", self.level.value])
        return path


@dataclass(frozen=True)
class PulseArrivals:
    """First-pulse arrival per cycle epoch, with every candidate kept for multipath handling."""

    arrivals: np.ndarray
    scores: np.ndarray
    epochs: np.ndarray
    candidates: tuple[np.ndarray, ...] = field(default=())
    candidate_scores: tuple[np.ndarray, ...] = field(default=())
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return self.arrivals.size

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "arrival", "score", "threshold", "candidates"])
            for i in range(self.arrivals.size):
                cands = ";".join(f"{c:.9f}" for c in self.candidates[i]) if self.candidates else ""
                thr = f"{self.thresholds[i]:.6f}" if self.thresholds.size else ""
                w.writerow([int(self.epochs[i]), f"{self.arrivals[i]:.9f}", f"{self.scores[i]:.6f}", thr, cands])
        return path


def pulse_template(params: WaveformParams) -> np.ndarray:
    """Phase pattern ``pi * sin(pi j Ts / Tp)`` over the truncated pulse length."""
    j = np.arange(params.pulse_samples)
    return math.pi * np.sin(math.pi * j / (params.pulse_duration * params.sample_rate))


IMAGE_CUTOFF_HZ = 2000.0


def _image_filter(sample_rate: float, cutoff: float = IMAGE_CUTOFF_HZ, taps: int = 101) -> np.ndarray:
    return signal.firwin(taps, cutoff, window=("kaiser", 8.0), fs=sample_rate)


def matched_score(stream: SampleStream, phi_r, params: WaveformParams, freq_offset: float = 0.0,
                  suppress_image: bool = True) -> ScoreSeries:
    """Correlate the stream with the pulse template at every start sample.

    ``phi_r`` is the carrier phase reference relative to a ``carrier_freq +
    freq_offset`` oscillator on the absolute sample grid (the convention of
    :class:`sonoloc.pll.PhaseTrack`): a scalar, or one value per sample.
    The score is ``sum_j r[k + j] cos(w (k + j) Ts + phi_r + p_j)``; the tail is
    computed against zero padding.

    The product also carries a double-frequency term whose ripple is as large
    as the curvature of the score's main lobe. With ``suppress_image`` it is
    removed by a zero-phase low-pass on the baseband product before summing.
    """
    if stream.sample_rate != params.sample_rate:
        raise InvalidParams("stream and waveform sample rates differ")
    n = len(stream)
    phi = np.broadcast_to(np.asarray(phi_r, dtype=float), (n,)) if np.ndim(phi_r) == 0 else np.asarray(phi_r, float)
    if phi.shape != (n,):
        raise InvalidParams("phi_r must be a scalar or have one value per sample")
    n0 = int(round(stream.start_time * stream.sample_rate))
    cyc = carrier_cycles(params.carrier_freq + freq_offset, stream.sample_rate, n0 + np.arange(n))
    w = stream.samples * np.exp(1j * (2.0 * math.pi * cyc + phi))
    if suppress_image:
        h = _image_filter(stream.sample_rate)
        w = signal.oaconvolve(w, h, mode="same") if w.size >= h.size else w
    tmpl = np.exp(-1j * pulse_template(params))
    padded = np.concatenate([w, np.zeros(tmpl.size - 1, dtype=complex)])
    m = signal.correlate(padded, tmpl, mode="valid", method="fft").real
    return ScoreSeries(m, ScoreLevel.RAW, stream.start_time, stream.sample_rate)


REFERENCE_SPAN = 0.1


def smooth_reference(phase: np.ndarray, sample_rate: float, span: float = REFERENCE_SPAN) -> np.ndarray:
    """Zero-phase quadratic smoothing of a PLL phase track over ``span`` seconds.

    The loop reacts causally to each pulse, so its raw phase leans during the
    pulse window and drags the score peak early. The smoothed track follows
    Doppler ramps but not the few-millisecond pulse transient.
    """
    phase = np.asarray(phase, dtype=float)
    n = int(span * sample_rate) | 1
    if phase.size <= n:
        n = phase.size - 1 if phase.size % 2 == 0 else phase.size
    if n < 5:
        return phase.copy()
    return signal.savgol_filter(phase, n, 2)


def score_track(stream: SampleStream, phase: np.ndarray, params: WaveformParams, freq_offset: float = 0.0,
                span: float = REFERENCE_SPAN) -> ScoreSeries:
    """Raw score with the carrier reference taken from a smoothed PLL phase track."""
    return matched_score(stream, smooth_reference(phase, stream.sample_rate, span), params, freq_offset)


def cycle_reference(phase: np.ndarray, times: np.ndarray, params: WaveformParams, origin: float = 0.0) -> np.ndarray:
    """Hold the phase constant over each cycle at its value when the cycle starts."""
    phase = np.asarray(phase, dtype=float)
    cycle = np.floor((np.asarray(times) - origin) / params.cycle_period)
    first = np.concatenate([[True], cycle[1:] != cycle[:-1]])
    idx = np.maximum.accumulate(np.where(first, np.arange(phase.size), 0))
    return phase[idx]


def _lag(params: WaveformParams, seconds: float) -> int:
    return int(round(seconds * params.sample_rate))


def _triple(x: np.ndarray, lag: int, circular: bool) -> np.ndarray:
    """``x[n - lag] + x[n] + x[n + lag]``, zero padded or wrapped."""
    if circular:
        return np.roll(x, lag) + x + np.roll(x, -lag)
    out = x.copy()
    if lag < x.size:
        out[lag:] += x[:-lag] if lag else x
        out[:-lag or None] += x[lag:] if lag else x
    return out


def aggregate(score: ScoreSeries, params: WaveformParams, level) -> ScoreSeries:
    """Three-way periodic sums: ``m1`` over the pulse spacing, ``m2`` over the cycle period."""
    level = ScoreLevel(level)
    if level is ScoreLevel.M1:
        if score.level is not ScoreLevel.RAW:
            raise WrongLevel(f"m1 is built from a raw score, got {score.level.value}")
        lag = _lag(params, params.pulse_spacing)
    elif level is ScoreLevel.M2:
        if score.level is not ScoreLevel.M1:
            raise WrongLevel(f"m2 is built from m1, got {score.level.value}")
        lag = _lag(params, params.cycle_period)
    else:
        raise WrongLevel(f"aggregate produces m1 or m2, not {level.value}")
    return ScoreSeries(_triple(score.m, lag, score.folded), level, score.start_time, score.sample_rate,
                       centred=True, folded=score.folded)


def static_accumulate(score: ScoreSeries, params: WaveformParams, n_cycles: int | None = None) -> ScoreSeries:
    """Fold the score modulo the cycle period and sum ``n_cycles`` whole cycles.

    Index ``i`` of the result stands for times ``start_time + i Ts + k T2``.
    """
    if score.folded:
        raise WrongLevel("score is already folded")
    period = _lag(params, params.cycle_period)
    available = score.m.size // period
    if available < 1:
        raise InsufficientInput("need at least one whole cycle of score to fold")
    if n_cycles is None:
        n_cycles = available
    if n_cycles < 1:
        raise InvalidParams("n_cycles must be at least 1")
    if n_cycles > available:
        raise InsufficientInput(f"only {available} whole cycles available, {n_cycles} requested")
    folded = score.m[: n_cycles * period].reshape(n_cycles, period).sum(axis=0)
    return ScoreSeries(folded, ScoreLevel.M3, score.start_time, score.sample_rate,
                       centred=score.centred, folded=True)


def _selection(score: ScoreSeries, params: WaveformParams) -> np.ndarray:
    """Series whose index ``k`` scores "a cycle's first pulse arrives at ``k``"."""
    lag = _lag(params, params.pulse_spacing)
    x = score.m
    if score.centred:
        if score.folded:
            return np.roll(x, -lag)
        return np.concatenate([x[lag:], np.zeros(min(lag, x.size))])
    # raw score: sum the three pulses forward from k
    if score.folded:
        return x + np.roll(x, -lag) + np.roll(x, -2 * lag)
    out = x.copy()
    out[:-lag or None] += x[lag:]
    out[:-2 * lag or None] += x[2 * lag:]
    return out


def _refine(sel: np.ndarray, k: int, circular: bool) -> float:
    n = sel.size
    if circular:
        a, b, c = sel[(k - 1) % n], sel[k], sel[(k + 1) % n]
    else:
        if k == 0 or k == n - 1:
            return float(k)
        a, b, c = sel[k - 1], sel[k], sel[k + 1]
    den = a - 2 * b + c
    if den >= 0:
        return float(k)
    return k + float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))


def detect_pulses(score: ScoreSeries, params: WaveformParams, sigmas: float = DETECTION_SIGMAS,
                  max_candidates: int = MAX_CANDIDATES, separation: int | None = None,
                  epoch_origin: float | None = None) -> PulseArrivals:
    """Local maxima above ``mean + sigmas * std`` of their cycle epoch.

    Candidates closer than ``separation`` samples (default half a pulse) are
    merged, and a peak with a larger one exactly a pulse spacing away is a
    side lobe of the three-pulse pattern and dropped. Each epoch keeps its
    ``max_candidates`` strongest candidates; the strongest is the arrival.
    Raises ``NoDetection`` when no epoch has a candidate.
    """
    if max_candidates < 1:
        raise InvalidParams("max_candidates must be at least 1")
    sel = _selection(score, params)
    n = sel.size
    if n == 0:
        raise NoDetection("empty score")
    fs = score.sample_rate
    circular = score.folded
    lag = _lag(params, params.pulse_spacing)
    sep = separation if separation is not None else max(1, params.pulse_samples // 2)

    mode = "wrap" if circular else "constant"
    peak = ndimage.maximum_filter1d(sel, size=2 * sep + 1, mode=mode, cval=-np.inf)
    idx = np.flatnonzero(sel >= peak)
    if circular:
        left, right = sel[(idx - lag) % n], sel[(idx + lag) % n]
    else:
        left = np.where(idx - lag >= 0, sel[np.clip(idx - lag, 0, n - 1)], -np.inf)
        right = np.where(idx + lag < n, sel[np.clip(idx + lag, 0, n - 1)], -np.inf)
    idx = idx[(sel[idx] >= left) & (sel[idx] >= right)]

    period = _lag(params, params.cycle_period)
    origin = 0 if epoch_origin is None or circular else int(round((epoch_origin - score.start_time) * fs))
    epoch_of = np.zeros(idx.size, dtype=int) if circular else (idx - origin) // period

    arrivals, scores, epochs, cands, cscores, thresholds = [], [], [], [], [], []
    first_epoch = 0 if circular else (0 - origin) // period
    last_epoch = 0 if circular else (n - 1 - origin) // period
    for e in range(first_epoch, last_epoch + 1):
        lo = max(0, origin + e * period)
        hi = min(n, origin + (e + 1) * period)
        seg = sel[lo:hi] if not circular else sel
        if seg.size < 2:
            continue
        thr = float(seg.mean() + sigmas * seg.std())
        mine = idx[(epoch_of == e) & (sel[idx] > thr)]
        if mine.size == 0:
            continue
        # greedy suppression of plateau / near-duplicate maxima
        order = mine[np.argsort(-sel[mine], kind="stable")]
        kept: list[int] = []
        for k in order:
            if circular:
                near = any(min(abs(k - j), n - abs(k - j)) <= sep for j in kept)
            else:
                near = any(abs(k - j) <= sep for j in kept)
            if not near:
                kept.append(int(k))
            if len(kept) == max_candidates:
                break
        times = np.array([score.start_time + _refine(sel, k, circular) / fs for k in kept])
        vals = sel[np.array(kept)]
        arrivals.append(times[0])
        scores.append(float(vals[0]))
        epochs.append(e)
        order_t = np.argsort(times)
        cands.append(times[order_t])
        cscores.append(vals[order_t])
        thresholds.append(thr)
    if not arrivals:
        raise NoDetection("no score peak exceeds the detection threshold")
    order = np.argsort(arrivals)
    pick = lambda seq: tuple(seq[i] for i in order)
    return PulseArrivals(np.asarray(arrivals)[order], np.asarray(scores)[order], np.asarray(epochs)[order],
                         pick(cands), pick(cscores), np.asarray(thresholds)[order])


def resolve_multipath(cands_a: Sequence[float], cands_b: Sequence[float], d: float,
                      params: WaveformParams | None = None, sound_speed: float | None = None) -> tuple[float, float]:
    """Pick the candidate pair whose time-of-flight difference best matches displacement ``d``.

    ``d = l_a - l_b``. With ``params`` given, the time difference is taken modulo
    the cycle period (nearest representative), so candidates from different
    cycles compare correctly. Ties go to the earliest ``t_a``, then ``t_b``.
    """
    a = np.asarray(list(cands_a), dtype=float)
    b = np.asarray(list(cands_b), dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptyCandidates("both candidate lists must be non-empty")
    if not math.isfinite(d):
        raise InvalidParams("displacement must be finite")
    va = sound_speed if sound_speed is not None else (params.sound_speed if params is not None else 340.0)
    diff = a[:, None] - b[None, :]
    if params is not None:
        period = params.cycle_period
        diff = diff - period * np.round(diff / period)
    cost = np.abs(diff * va - d)
    best = cost.min()
    tol = 1e-9 * max(1.0, abs(d))
    ia, ib = np.nonzero(cost <= best + tol)
    order = np.lexsort((b[ib], a[ia]))
    return float(a[ia[order[0]]]), float(b[ib[order[0]]])
