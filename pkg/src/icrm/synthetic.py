"""Seeded synthetic rhythms for data-independent testing.

NSR is a Gaussian-bump PQRST phantom, AFL a regular sawtooth, AFB an
irregular, amplitude-jittered fibrillatory oscillation. Only rate and regularity
statistics are meant to be realistic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import ClassLabel
from .signal_io import ChannelKind, SignalRecord, make_record

# (relative time s, amplitude mV, width s) for P, Q, R, S, T
PQRST = (
    (-0.20, 0.15, 0.025),
    (-0.035, -0.12, 0.010),
    (0.0, 1.00, 0.012),
    (0.035, -0.25, 0.010),
    (0.24, 0.30, 0.040),
)
NOISE_MV = 0.005
EGM_POLES = 5


@dataclass(frozen=True)
class RhythmSpec:
    label: ClassLabel
    rate_per_min: float
    irregularity: float  # coefficient of variation of inter-event intervals
    amplitude_mv: float
    amplitude_jitter: float = 0.0  # relative std of per-event amplitude

    @classmethod
    def default(cls, label) -> "RhythmSpec":
        label = ClassLabel.parse(label)
        if label is ClassLabel.NSR:
            return cls(label, 72.0, 0.0, 1.0)
        if label is ClassLabel.AFL:
            return cls(label, 300.0, 0.0, 0.3)
        return cls(label, 400.0, 0.3, 0.25, amplitude_jitter=0.3)


def event_times(spec: RhythmSpec, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    """Event onsets in seconds within [0, duration_s)."""
    mean = 60.0 / spec.rate_per_min
    if spec.label is ClassLabel.NSR:
        # slow ±3% rate drift around the nominal rate
        n = int(duration_s / mean) + 2
        intervals = mean * (1 + rng.uniform(-0.03, 0.03, n))
        phase = rng.uniform(0.3, 0.3 + mean)
    elif spec.irregularity > 0:
        shape = 1.0 / spec.irregularity**2
        n = int(3 * duration_s / mean) + 10
        intervals = rng.gamma(shape, mean / shape, n)
        phase = rng.uniform(0, mean)
    else:
        n = int(duration_s / mean) + 2
        intervals = np.full(n, mean)
        phase = rng.uniform(0, mean)
    t = phase + np.concatenate([[0.0], np.cumsum(intervals)])
    return t[t < duration_s]


def _bumps(t: np.ndarray, centres: np.ndarray, amps: np.ndarray, width: float) -> np.ndarray:
    out = np.zeros_like(t)
    lo = np.searchsorted(t, centres - 5 * width)
    hi = np.searchsorted(t, centres + 5 * width)
    for c, a, i, j in zip(centres, amps, lo, hi):
        out[i:j] += a * np.exp(-0.5 * ((t[i:j] - c) / width) ** 2)
    return out


def _waveform(spec: RhythmSpec, events: np.ndarray, t: np.ndarray, rng: np.random.Generator,
              kind: ChannelKind, pole: int = 0) -> np.ndarray:
    amps = spec.amplitude_mv * (1 + spec.amplitude_jitter * rng.standard_normal(events.size))
    amps = np.clip(amps, 0.2 * spec.amplitude_mv, None)
    if kind is ChannelKind.IntracardiacEGM:
        # biphasic local activation, later and narrower on distal poles
        delay = 0.004 * pole
        width = 0.004
        scale = 1.0 / (1 + 0.25 * pole)
        return scale * (_bumps(t, events + delay, amps, width)
                        - _bumps(t, events + delay + 2.5 * width, 0.8 * amps, width))
    if spec.label is ClassLabel.NSR:
        x = np.zeros_like(t)
        for offset, a, w in PQRST:
            x += _bumps(t, events + offset, amps * a, w)
        return x
    if spec.label is ClassLabel.AFL:
        period = 60.0 / spec.rate_per_min
        phase = ((t - events[0]) / period) % 1.0 if events.size else t * 0
        # slow rise, fast fall: the flutter-wave sawtooth
        ramp = np.where(phase < 0.8, phase / 0.8, (1 - phase) / 0.2)
        return spec.amplitude_mv * (ramp - 0.5)
    # fibrillatory waves: one cosine cycle per irregular interval, peaks at the events
    if events.size < 2:
        return np.interp(t, events, amps) * np.cos(2 * np.pi * spec.rate_per_min / 60 * t)
    i = np.clip(np.searchsorted(events, t, side="right") - 1, 0, events.size - 2)
    phase = 2 * np.pi * (t - events[i]) / (events[i + 1] - events[i])
    return np.interp(t, events, amps) * np.cos(phase)


def generate_synthetic(spec: RhythmSpec, duration_s: float, sampling_rate: float = 1000.0,
                       seed: int = 0, kind: ChannelKind = ChannelKind.SurfaceECG,
                       name: str | None = None) -> SignalRecord:
    """One-lead ECG record, or an EGM record with several catheter poles."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    kind = ChannelKind.parse(kind)
    rng = np.random.default_rng([seed, int(spec.label)])
    n = int(round(duration_s * sampling_rate))
    t = np.arange(n) / sampling_rate
    events = event_times(spec, duration_s, rng)
    if kind is ChannelKind.SurfaceECG:
        rows = [_waveform(spec, events, t, rng, kind)]
        desc = ["ECG lead I"]
    else:
        rows = [_waveform(spec, events, t, rng, kind, pole) for pole in range(EGM_POLES)]
        desc = [f"EGM pole {p + 1}" for p in range(EGM_POLES)]
    channels = np.stack(rows) + NOISE_MV * rng.standard_normal((len(rows), n))
    name = name or f"synth_{spec.label.name.lower()}_{seed}"
    return make_record(name, channels, sampling_rate, descriptions=desc)


def synthesize(label, duration_s: float, seed: int = 0, sampling_rate: float = 1000.0,
               kind: ChannelKind = ChannelKind.SurfaceECG) -> SignalRecord:
    return generate_synthetic(RhythmSpec.default(label), duration_s, sampling_rate, seed, kind)
