"""Relative positioning of a walking receiver from an inaudible acoustic carrier."""

from .channel import ChannelModel, EchoPath, Scenario, StepTrace, ideal_displacements, propagate
from .errors import SonolocError
from .frontend import BpfSpec, preprocess
from .locator import (GroundFix, LineFixInput, PositionFix, Segment, SyncState, anchor_sync, dead_reckon,
                      direction_after_sync, solve_line, solve_multi_segment, sync_range)
from .pll import PhaseTrack, PllConfig, displacements_at_steps, estimate_freq_offset, track
from .pulsedet import PulseArrivals, ScoreSeries, aggregate, detect_pulses, matched_score, resolve_multipath
from .streams import DisplacementSeries, SampleStream
from .waveform import WaveformParams, build_pulse_schedule, synthesize, transmit

__version__ = "0.1.0"

__all__ = [
    "BpfSpec", "ChannelModel", "DisplacementSeries", "EchoPath", "GroundFix", "LineFixInput", "PhaseTrack",
    "PllConfig", "PositionFix", "PulseArrivals", "SampleStream", "Scenario", "ScoreSeries", "Segment",
    "SonolocError", "StepTrace", "SyncState", "WaveformParams", "aggregate", "anchor_sync",
    "build_pulse_schedule", "dead_reckon", "detect_pulses", "direction_after_sync", "displacements_at_steps",
    "estimate_freq_offset", "ideal_displacements", "matched_score", "preprocess", "propagate",
    "resolve_multipath", "solve_line", "solve_multi_segment", "sync_range", "synthesize", "track", "transmit",
]
