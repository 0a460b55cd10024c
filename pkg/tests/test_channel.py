import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from sonoloc.channel import (ChannelModel, EchoPath, Scenario, StepTrace, arrival_times, back_and_forth,
                             distance_profile, ideal_displacements, mix, propagate, received_phase, static_trace,
                             step_distances, straight_walk, write_trajectory_csv)
from sonoloc.errors import InsufficientInput, InvalidParams
from sonoloc.streams import SampleStream
from sonoloc.waveform import PulseSchedule, WaveformParams, build_pulse_schedule, synthesize, transmit

from conftest import F, FS, perfect_demod


def even_walk(n, stride=0.6, dt=0.5, t0=1.0):
    return StepTrace(tuple(t0 + dt * np.arange(n + 1)), stride)


def carrier_only(params, duration):
    return synthesize(params, PulseSchedule((), params.cycle_period), duration)


class TestGeometry:
    def test_perpendicular_foot(self):
        sc = Scenario((0.0, 4.0, 0.0), static_trace())
        assert distance_profile(sc, 0.0) == pytest.approx(4.0)

    def test_step_distances(self):
        sc = Scenario((4.0, 4.0, 0.0), even_walk(10))
        l = step_distances(sc)
        assert l[0] == pytest.approx(5.6569, abs=1e-4)
        assert l[1] == pytest.approx(5.2498, abs=1e-4)
        assert distance_profile(sc, sc.trajectory.step_times[1]) == pytest.approx(l[1], abs=1e-12)

    def test_static_profile_constant(self):
        sc = Scenario((3.0, 4.0, 1.0), static_trace(), duration=5.0)
        d = distance_profile(sc, np.linspace(0, 5, 50))
        assert np.allclose(d, math.sqrt(26.0))

    def test_ideal_displacements(self):
        d = ideal_displacements(Scenario((4.0, 4.0, 0.0), even_walk(10))).d
        assert d[0] == pytest.approx(0.4071, abs=1e-4)

    def test_symmetric_walk(self):
        d = ideal_displacements(Scenario((0.6, 4.0, 0.0), even_walk(2))).d
        assert d[0] == pytest.approx(0.0448, abs=1e-4)
        assert d[1] == pytest.approx(-d[0], abs=1e-12)

    def test_collinear_retreat(self):
        d = ideal_displacements(Scenario((-5.0, 0.0, 0.0), even_walk(8))).d
        assert np.allclose(d, -0.6)

    def test_height_enters_slant_distance(self):
        sc = Scenario((4.0, 3.0, 1.5), static_trace())
        assert sc.slant_offset == pytest.approx(math.hypot(3.0, 1.5))
        assert sc.along_track == -4.0
        assert distance_profile(sc, 0.0) == pytest.approx(math.sqrt(16 + 9 + 2.25))

    def test_negative_height_rejected(self):
        with pytest.raises(InvalidParams):
            Scenario((1.0, 1.0, -0.5), static_trace())

    def test_turns_rotate_strides(self):
        tr = StepTrace((0.0, 1.0, 2.0, 3.0), 1.0, ((2, math.pi / 2),))
        assert np.allclose(tr.points(), [[0, 0], [1, 0], [2, 0], [2, 1]])
        assert tr.segments() == [(0, 2, 0.0), (2, 1, math.pi / 2)]


class TestTrajectory:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.2, 1.0), min_size=2, max_size=8), st.floats(0.3, 1.0))
    def test_hits_every_step_point(self, gaps, stride):
        times = tuple(np.cumsum([0.5] + gaps))
        tr = StepTrace(times, stride)
        assert np.allclose(tr.position(np.array(times)), tr.points(), atol=1e-12)

    def test_velocity_is_continuous(self):
        tr = straight_walk(8, 0.7, 0.5, 1.0, 2)
        h = 1e-6
        for t in tr.step_times[1:-1]:
            left = (tr.position(t) - tr.position(t - h)) / h
            right = (tr.position(t + h) - tr.position(t)) / h
            assert np.allclose(left, right, atol=1e-3)

    def test_stands_still_outside_walk(self):
        tr = straight_walk(4, 0.6)
        assert np.allclose(tr.position(0.0), tr.points()[0])
        assert np.allclose(tr.position(100.0), tr.points()[-1])

    def test_straight_walk_stride_and_count(self):
        tr = straight_walk(12, 0.6, 0.5, 1.0, 3)
        pts = tr.points()
        assert pts.shape == (13, 2)
        assert np.allclose(np.diff(pts[:, 0]), 0.6)
        # cruising steps take the nominal interval
        assert np.diff(tr.step_times)[6] == pytest.approx(0.5, rel=0.05)

    def test_back_and_forth_returns(self):
        tr = back_and_forth(1.0, 3, 6.0)
        assert np.allclose(tr.points()[-1], tr.points()[0], atol=1e-9)
        assert tr.points()[:, 0].max() == pytest.approx(1.0)

    def test_bad_trace(self):
        with pytest.raises(InvalidParams):
            StepTrace((1.0, 0.5), 0.6)
        with pytest.raises(InvalidParams):
            StepTrace((0.0, 1.0), 0.0)
        with pytest.raises(InvalidParams):
            StepTrace((0.0, 1.0), 0.6, velocities=((0.0, 0.0),))

    def test_trajectory_csv(self, tmp_path):
        sc = Scenario((0.0, 5.0, 0.0), static_trace(), duration=1.0)
        rows = list(csv.DictReader(write_trajectory_csv(sc, tmp_path / "t.csv", 0.1).open()))
        assert len(rows) == 11
        assert {float(r["distance"]) for r in rows} == {5.0}


class TestPropagate:
    def test_bulk_delay(self, params):
        # 8.5 m static: received = tx(t - 0.025 s) / 8.5, i.e. 1102.5 samples late
        sc = Scenario((0.0, 8.5, 0.0), static_trace(), duration=2.0)
        tx = transmit(params, 2.0)
        rx = propagate(tx, sc, ChannelModel())
        assert 8.5 / 340.0 * FS == pytest.approx(1102.5)
        sch = build_pulse_schedule(params, 2.5, 0.0)
        late = synthesize(params, sch, 2.0, start_time=-0.025)
        err = np.abs(rx.samples * 8.5 - late.samples)[3000:-3000]
        assert np.sqrt(np.mean(err ** 2)) < 2e-3
        # pulse edges have a phase kink (not band-limited); away from them the interpolation is exact to 1e-3
        edges = np.concatenate([np.array(sch.starts), np.array(sch.starts) + params.pulse_duration]) + 0.025
        t = rx.times[3000:-3000]
        far = np.min(np.abs(t[:, None] - edges[None, :]), axis=1) > 0.003
        assert np.max(err[far]) < 1e-3

    def test_silent_before_first_arrival(self, params):
        sc = Scenario((0.0, 8.5, 0.0), static_trace(), duration=1.0)
        rx = propagate(transmit(params, 1.0), sc, ChannelModel())
        assert np.max(np.abs(rx.samples[:1000])) < 1e-3

    def test_doppler_slope(self):
        # constant 1 m/s straight at a far speaker: phase slope 2 pi f v / v_a
        p = WaveformParams()
        v = 1.0
        times = tuple(1.0 + 0.5 * np.arange(9))
        tr = StepTrace(times, 0.5, velocities=tuple((v, 0.0) for _ in times))
        sc = Scenario((60.0, 0.0, 0.0), tr, duration=6.0)
        rx = propagate(carrier_only(p, 6.0), sc, ChannelModel())
        ph = perfect_demod(rx.samples)
        i0, i1 = int(2.0 * FS), int(4.5 * FS)
        slope = np.polyfit(np.arange(i0, i1) / FS, ph[i0:i1], 1)[0]
        dist = distance_profile(sc, np.array([2.0, 4.5]))
        expect = -2 * math.pi * F * (dist[1] - dist[0]) / 2.5 / 340.0
        assert expect == pytest.approx(2 * math.pi * F * v / 340.0, rel=1e-9)
        assert slope == pytest.approx(expect, rel=1e-3)

    def test_phase_tracks_distance_per_step(self):
        p = WaveformParams()
        tr = straight_walk(10, 0.6, 0.5, 1.0, 2)
        sc = Scenario((4.0, 4.0, 0.0), tr, duration=tr.step_times[-1] + 1.0)
        m = ChannelModel()
        rx = propagate(carrier_only(p, sc.end_time), sc, m)
        ph = perfect_demod(rx.samples)
        dphi = np.diff(np.interp(tr.step_times, rx.times, ph))
        expect = -2 * math.pi * F * np.diff(step_distances(sc)) / 340.0
        assert np.max(np.abs(dphi - expect)) < 1e-3
        truth = received_phase(sc, m, np.asarray(tr.step_times), F)
        assert np.allclose(np.diff(truth), expect, atol=1e-9)

    def test_energy_conserved_without_attenuation(self, params):
        tr = straight_walk(6, 0.6)
        sc = Scenario((3.0, 2.0, 0.0), tr, duration=tr.step_times[-1] + 0.5)
        tx = transmit(params, sc.end_time)
        rx = propagate(tx, sc, ChannelModel(attenuation_exponent=0.0))
        core = slice(4410, len(rx))
        assert np.sqrt(np.mean(rx.samples[core] ** 2)) == pytest.approx(np.sqrt(np.mean(tx.samples ** 2)), rel=0.01)

    def test_in_band_snr(self, params):
        sc = Scenario((0.0, 5.0, 0.0), static_trace(), seed=4, duration=4.0)
        tx = transmit(params, 4.0)
        clean = propagate(tx, sc, ChannelModel())
        noisy = propagate(tx, sc, ChannelModel(snr_db=3.0))
        noise = noisy.samples - clean.samples
        sos = signal.butter(8, [F - 500, F + 500], btype="band", fs=FS, output="sos")
        inband = signal.sosfiltfilt(sos, noise)
        ratio = np.mean(clean.samples ** 2) / np.mean(inband ** 2)
        assert 10 * np.log10(ratio) == pytest.approx(3.0, abs=0.5)

    def test_reproducible_noise(self, params):
        tx = transmit(params, 1.0)
        a = propagate(tx, Scenario((0.0, 5.0), static_trace(), seed=7), ChannelModel(snr_db=0.0))
        b = propagate(tx, Scenario((0.0, 5.0), static_trace(), seed=7), ChannelModel(snr_db=0.0))
        c = propagate(tx, Scenario((0.0, 5.0), static_trace(), seed=8), ChannelModel(snr_db=0.0))
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_clock_offset_shifts_carrier(self):
        p = WaveformParams()
        sc = Scenario((0.0, 5.0, 0.0), static_trace(), duration=6.0)
        rx = propagate(carrier_only(p, 6.0), sc, ChannelModel(freq_offset=0.5))
        ph = perfect_demod(rx.samples)
        i0, i1 = int(1.0 * FS), int(5.5 * FS)
        slope = np.polyfit(np.arange(i0, i1) / FS, ph[i0:i1], 1)[0]
        assert slope / (2 * math.pi) == pytest.approx(0.5, rel=1e-3)

    def test_needs_enough_transmit(self, params):
        sc = Scenario((0.0, 5.0, 0.0), static_trace())
        with pytest.raises(InsufficientInput):
            propagate(transmit(params, 1.0), sc, ChannelModel(), duration=1.5)

    def test_echo_is_delayed_copy(self, params):
        sc = Scenario((0.0, 5.0, 0.0), static_trace(), duration=1.0)
        tx = transmit(params, 1.0)
        direct = propagate(tx, sc, ChannelModel())
        shift = 220
        both = propagate(tx, sc, ChannelModel(paths=(EchoPath(0.5, shift / FS),)))
        echo = both.samples - direct.samples
        core = slice(3000, len(tx) - 100)
        shifted = np.concatenate([np.zeros(shift), direct.samples[:-shift]])
        assert np.max(np.abs(echo[core] - 0.5 * shifted[core])) < 5e-3 * np.max(np.abs(direct.samples))

    def test_echo_validation(self):
        with pytest.raises(InvalidParams):
            EchoPath(1.5, 0.01)
        with pytest.raises(InvalidParams):
            EchoPath(0.5, 0.0)
        assert EchoPath(0.5, image=(1.0, -3.0)).image == (1.0, -3.0, 0.0)

    def test_arrival_times_static(self, params):
        sc = Scenario((0.0, 8.5, 0.0), static_trace())
        got = arrival_times(sc, ChannelModel(), [0.16, 0.19])
        assert got == pytest.approx([0.185, 0.215])

    def test_arrival_times_clock_offset(self):
        sc = Scenario((0.0, 3.4, 0.0), static_trace())
        m = ChannelModel(freq_offset=1.9)
        assert arrival_times(sc, m, [100.0])[0] == pytest.approx(100.0 / 1.0001 + 0.01)

    def test_mix(self):
        a = SampleStream(np.ones(4), FS)
        assert mix([a, a, a]).samples.tolist() == [3.0] * 4
