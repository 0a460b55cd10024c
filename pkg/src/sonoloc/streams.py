"""Immutable containers passed between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParams


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SampleStream:
    """Mono audio samples on a uniform grid starting at ``start_time``."""

    samples: np.ndarray
    sample_rate: float
    start_time: float = 0.0

    def __post_init__(self):
        samples = _frozen_array(self.samples)
        if samples.ndim != 1:
            raise InvalidParams("SampleStream must be mono (1-D)")
        if not self.sample_rate > 0:
            raise InvalidParams("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise InvalidParams("SampleStream samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))
        object.__setattr__(self, "start_time", float(self.start_time))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def sample_period(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.samples.size) / self.sample_rate

    def index_of(self, t: float) -> int:
        """Nearest sample index for absolute time ``t`` (not clipped)."""
        return int(round((t - self.start_time) * self.sample_rate))

    def with_samples(self, samples) -> "SampleStream":
        return SampleStream(samples, self.sample_rate, self.start_time)

    def window(self, t0: float, t1: float) -> "SampleStream":
        """Sub-stream covering ``[t0, t1)``, clipped to the available span."""
        i0 = max(0, int(np.ceil((t0 - self.start_time) * self.sample_rate - 1e-9)))
        i1 = min(self.samples.size, int(np.ceil((t1 - self.start_time) * self.sample_rate - 1e-9)))
        i1 = max(i0, i1)
        return SampleStream(self.samples[i0:i1], self.sample_rate, self.start_time + i0 / self.sample_rate)

    def __add__(self, other: "SampleStream") -> "SampleStream":
        if other.sample_rate != self.sample_rate or other.start_time != self.start_time or len(other) != len(self):
            raise InvalidParams("streams must share sample grid to be mixed")
        return self.with_samples(self.samples + other.samples)


@dataclass(frozen=True)
class DisplacementSeries:
    """Per-step displacements ``d[i] = l[i] - l[i+1]`` (positive when approaching).

    ``step_times`` has one more entry than ``d``: the instants bounding each step.
    NaN entries mark steps gated out as unreliable.
    """

    d: np.ndarray
    step_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        d = _frozen_array(self.d)
        times = _frozen_array(self.step_times)
        if d.ndim != 1 or times.ndim != 1:
            raise InvalidParams("DisplacementSeries arrays must be 1-D")
        if times.size not in (0, d.size + 1):
            raise InvalidParams("step_times must bound every displacement (len(d) + 1 entries)")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "step_times", times)

    def __len__(self) -> int:
        return self.d.size

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.d)
