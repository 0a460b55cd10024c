"""SampleStream persistence: mono WAV (PCM16 / float32) and raw float32 with a JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import InvalidParams
from .streams import SampleStream

WAV_FORMATS = ("pcm16", "float32")


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")


def write_wav(stream: SampleStream, path, fmt: str = "pcm16") -> Path:
    if fmt not in WAV_FORMATS:
        raise InvalidParams(f"unknown WAV format {fmt!r}; expected one of {WAV_FORMATS}")
    rate = int(round(stream.sample_rate))
    if rate != stream.sample_rate:
        raise InvalidParams("WAV needs an integer sample rate")
    data = quantize_pcm16(stream.samples) if fmt == "pcm16" else stream.samples.astype("<f4")
    path = Path(path)
    wavfile.write(path, rate, data)
    return path


def read_wav(path, start_time: float = 0.0) -> SampleStream:
    rate, data = wavfile.read(Path(path))
    if data.ndim != 1:
        raise InvalidParams("only mono WAV files are supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32767.0
    elif data.dtype.kind == "f":
        samples = data.astype(np.float64)
    else:
        raise InvalidParams(f"unsupported WAV sample type {data.dtype}")
    return SampleStream(samples, float(rate), start_time)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_raw(stream: SampleStream, path) -> Path:
    """Little-endian float32 samples plus ``<path>.json`` holding rate and start time."""
    path = Path(path)
    stream.samples.astype("<f4").tofile(path)
    meta = {"sample_rate": stream.sample_rate, "start_time": stream.start_time,
            "dtype": "float32le", "channels": 1, "length": len(stream)}
    _sidecar(path).write_text(json.dumps(meta, indent=2))
    return path


def read_raw(path) -> SampleStream:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("dtype", "float32le") != "float32le":
        raise InvalidParams(f"unsupported raw dtype {meta.get('dtype')!r}")
    samples = np.fromfile(path, dtype="<f4").astype(np.float64)
    return SampleStream(samples, meta["sample_rate"], meta.get("start_time", 0.0))


def load_stream(path) -> SampleStream:
    """Dispatch on extension: ``.wav`` or raw float32 with sidecar."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return read_wav(path)
    return read_raw(path)
