import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonoloc.audio_io import load_stream, quantize_pcm16, read_raw, read_wav, write_raw, write_wav
from sonoloc.errors import InvalidParams
from sonoloc.streams import SampleStream
from sonoloc.waveform import (MAX_CONCURRENT_CARRIERS, PULSE_BANDWIDTH_HZ, PulseSchedule, WaveformParams,
                              build_pulse_schedule, carrier_cycles, pulse_phase, synthesize, transmit)

from conftest import perfect_demod


def brute_schedule(p: WaveformParams, duration: float) -> list[float]:
    """Enumerate every cycle and keep pulse starts inside [0, duration)."""
    out = []
    for k in range(int(duration / p.cycle_period) + 2):
        for j in range(3):
            tau = k * p.cycle_period + p.carrier_duration + j * p.pulse_spacing
            if tau < duration:
                out.append(tau)
    return sorted(out)


class TestParams:
    def test_defaults_are_valid(self, params):
        assert params.validate() is params
        assert params.pulse_samples == 308

    @pytest.mark.parametrize("change", [
        {"carrier_freq": 16000.0},
        {"carrier_freq": 24500.0},
        {"carrier_duration": 0.15},
        {"pulse_spacing": 0.005, "carrier_duration": 0.235},
        {"max_range": 90.0},
        {"sample_rate": 30000.0},
    ])
    def test_invariant_violations_raise(self, change):
        fields = WaveformParams().__dict__ | change
        with pytest.raises(InvalidParams):
            WaveformParams(**fields).validate()

    def test_concurrent_carrier_count(self):
        assert MAX_CONCURRENT_CARRIERS == int((24000 - 17000) / PULSE_BANDWIDTH_HZ)


class TestSchedule:
    def test_single_cycle(self, params):
        assert build_pulse_schedule(params, 0.25).starts == pytest.approx((0.16, 0.19, 0.22))

    def test_empty(self, params):
        assert len(build_pulse_schedule(params, 0.0)) == 0

    def test_two_cycles(self, params):
        got = build_pulse_schedule(params, 0.5).starts
        assert got == pytest.approx((0.16, 0.19, 0.22, 0.41, 0.44, 0.47))
        assert list(got) == pytest.approx(brute_schedule(params, 0.5))

    def test_negative_duration(self, params):
        with pytest.raises(InvalidParams):
            build_pulse_schedule(params, -1.0)

    def test_invalid_params_rejected(self):
        with pytest.raises(InvalidParams):
            build_pulse_schedule(WaveformParams(carrier_freq=10000.0), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.0, 20.0))
    def test_matches_enumeration_and_period(self, duration):
        p = WaveformParams()
        tau = np.array(build_pulse_schedule(p, duration).starts)
        assert tau == pytest.approx(np.array(brute_schedule(p, duration)), abs=1e-12)
        assert np.all(np.diff(tau) > 0)
        if tau.size > 3:
            assert np.allclose(tau[3:] - tau[:-3], p.cycle_period)
        # every pulse ends inside its own cycle
        cycle = np.floor(tau / p.cycle_period + 1e-9)
        assert np.all(tau + p.pulse_duration <= (cycle + 1) * p.cycle_period + 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 5.0), st.floats(0.01, 3.0))
    def test_offset_window_is_a_slice(self, start, duration):
        p = WaveformParams()
        full = np.array(build_pulse_schedule(p, start + duration).starts)
        part = np.array(build_pulse_schedule(p, duration, start).starts)
        expect = full[full >= start]
        assert part == pytest.approx(expect, abs=1e-12)


class TestSynthesize:
    def test_first_sample_is_one(self, params):
        s = synthesize(params, build_pulse_schedule(params, 1.0), 1.0)
        assert s.samples[0] == 1.0

    def test_pulse_phase_shape(self, params):
        sch = build_pulse_schedule(params, 0.25)
        tau = sch.starts[0]
        tp = params.pulse_duration
        assert pulse_phase(params, sch, [tau])[0] == pytest.approx(0.0, abs=1e-12)
        assert pulse_phase(params, sch, [tau + tp])[0] == pytest.approx(0.0, abs=1e-12)
        assert pulse_phase(params, sch, [tau + tp / 2])[0] == pytest.approx(math.pi, abs=1e-12)
        assert pulse_phase(params, sch, [0.1, 0.24])[0] == 0.0

    def test_samples_follow_closed_form(self, params):
        sch = build_pulse_schedule(params, 0.5)
        s = synthesize(params, sch, 0.5)
        t = np.arange(len(s)) / params.sample_rate
        p = np.zeros_like(t)
        for tau in sch.starts:
            inside = (t >= tau) & (t <= tau + params.pulse_duration)
            p[inside] = math.pi * np.sin(math.pi * (t[inside] - tau) / params.pulse_duration)
        expect = np.cos(2 * math.pi * params.carrier_freq * t + p)
        assert np.max(np.abs(s.samples - expect)) < 1e-9
        assert np.max(np.abs(s.samples)) == pytest.approx(1.0, abs=1e-6)
        assert np.max(np.abs(s.samples)) <= 1.0

    def test_demodulated_phase_is_the_pulse_pattern(self, params):
        # an ideal oscillator sees zero phase outside pulses and pi*sin(...) inside
        sch = build_pulse_schedule(params, 1.0)
        s = synthesize(params, sch, 1.0)
        ph = perfect_demod(s.samples, cutoff=4000.0)
        ph = ph - ph[2000]
        truth = pulse_phase(params, sch, s.times)
        core = slice(2000, len(s) - 2000)
        assert np.max(np.abs(ph[core] - truth[core])) < 0.1
        carrier_only = (truth == 0.0)
        carrier_only[: 2000] = False
        assert np.max(np.abs(ph[carrier_only & (np.arange(len(s)) < len(s) - 2000)])) < 0.1

    def test_energy_within_pulse_bandwidth(self, params):
        x = transmit(params, params.cycle_period).samples
        spec = np.abs(np.fft.rfft(x)) ** 2
        f = np.fft.rfftfreq(x.size, 1 / params.sample_rate)
        inside = np.abs(f - params.carrier_freq) <= PULSE_BANDWIDTH_HZ
        assert spec[inside].sum() / spec.sum() >= 0.99

    def test_schedule_period_mismatch(self, params):
        with pytest.raises(InvalidParams):
            synthesize(params, PulseSchedule((), 0.5), 1.0)

    def test_start_time_continuity(self, params):
        whole = transmit(params, 2.0)
        tail = transmit(params, 1.0, start_time=1.0)
        assert np.max(np.abs(whole.samples[44100:] - tail.samples)) < 1e-9


class TestCarrierCycles:
    @pytest.mark.parametrize("n", [0, 1, 12345, 44100 * 600 + 17, 44100 * 3600 * 5 + 3])
    def test_exact_modulo(self, n):
        exact = Fraction(19000) * n / 44100 % 1
        got = carrier_cycles(19000.0, 44100.0, np.array([n]))[0]
        assert got == pytest.approx(float(exact), abs=1e-9)

    @pytest.mark.parametrize("n", [1, 44100 * 600 + 17])
    def test_offset_carrier(self, n):
        exact = Fraction(190001, 10) * n / 44100 % 1
        got = carrier_cycles(19000.1, 44100.0, np.array([n]))[0]
        assert got == pytest.approx(float(exact), abs=1e-8)

    def test_with_start_time(self):
        exact = (Fraction(19000) * Fraction(3, 2) + Fraction(19000) * 10 / 44100) % 1
        assert carrier_cycles(19000.0, 44100.0, np.array([10]), 1.5)[0] == pytest.approx(float(exact), abs=1e-9)


class TestAudioIO:
    def test_wav_float_roundtrip(self, params, tmp_path):
        s = transmit(params, 0.3)
        back = read_wav(write_wav(s, tmp_path / "a.wav", "float32"))
        assert back.sample_rate == s.sample_rate
        assert np.max(np.abs(back.samples - s.samples)) < 1e-6

    def test_wav_pcm16_quantization(self, params, tmp_path):
        s = transmit(params, 0.3)
        back = load_stream(write_wav(s, tmp_path / "a.wav"))
        assert np.max(np.abs(back.samples - s.samples)) <= 0.5 / 32767 + 1e-12
        assert quantize_pcm16(np.array([2.0, -2.0])).tolist() == [32767, -32767]

    def test_raw_roundtrip_with_sidecar(self, tmp_path):
        s = SampleStream(np.linspace(-1, 1, 101), 44100.0, 2.5)
        path = write_raw(s, tmp_path / "a.f32")
        meta = json.loads((tmp_path / "a.f32.json").read_text())
        assert meta["sample_rate"] == 44100.0 and meta["start_time"] == 2.5
        back = read_raw(path)
        assert back.start_time == 2.5
        assert np.allclose(back.samples, s.samples, atol=1e-7)

    def test_bad_format(self, tmp_path):
        with pytest.raises(InvalidParams):
            write_wav(SampleStream(np.zeros(4), 44100.0), tmp_path / "a.wav", "pcm24")


class TestSampleStream:
    def test_rejects_non_finite(self):
        with pytest.raises(InvalidParams):
            SampleStream(np.array([0.0, np.nan]), 44100.0)

    def test_immutable(self):
        s = SampleStream(np.zeros(4), 44100.0)
        with pytest.raises(ValueError):
            s.samples[0] = 1.0

    def test_window(self):
        s = SampleStream(np.arange(100.0), 100.0, 1.0)
        w = s.window(1.2, 1.5)
        assert w.samples.tolist() == list(range(20, 50))
        assert w.start_time == pytest.approx(1.2)
