import math

import numpy as np
import pytest
from scipy import signal

from sonoloc.waveform import WaveformParams

FS = 44100.0
F = 19000.0


@pytest.fixture
def params():
    return WaveformParams()


def perfect_demod(samples: np.ndarray, freq: float = F, fs: float = FS, start_time: float = 0.0,
                  cutoff: float = 300.0) -> np.ndarray:
    """Unwrapped phase of ``samples`` against an ideal ``freq`` oscillator (zero-phase low-pass)."""
    n = np.arange(samples.size)
    lo = np.exp(-1j * 2 * math.pi * ((freq * (start_time + n / fs)) % 1.0))
    b, a = signal.butter(4, cutoff, fs=fs)
    base = signal.filtfilt(b, a, samples * lo)
    return np.unwrap(np.angle(base))


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; returns whether it passed."""
    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
