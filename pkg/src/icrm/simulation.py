"""Whole-system run: ECG and EGM emulators, the actuator and the Communicator on
seeded lossy links inside one simpy environment.
"""
from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import simpy
import simpy.rt

from . import ann, dsp
from . import protocol as proto
from .communicator import Communicator, DecisionPolicy, ReportSink
from .devices import (ACTUATOR_DEVICE_ID, ECG_DEVICE_ID, EGM_DEVICE_ID, ActuatorEmulator,
                      EmulatorConfig, SensorEmulator)
from .signal_io import ChannelKind, SignalRecord, channels_of_kind


class PacingError(ValueError):
    pass


@dataclass(frozen=True)
class Pacing:
    """``realtime`` maps 1 simulated ms to 1 wall ms; ``xN`` runs N times faster; ``fast`` never sleeps."""

    mode: str = "fast"
    speedup: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "Pacing":
        text = str(text).strip().lower()
        if text == "realtime":
            return cls("realtime", 1.0)
        if text in ("fast", "max"):
            return cls("fast", float("inf"))
        m = re.fullmatch(r"x(\d+(?:\.\d+)?)", text)
        if m and float(m.group(1)) > 0:
            return cls("accelerated", float(m.group(1)))
        raise PacingError(f"pacing must be realtime, fast or xN, got {text!r}")

    def __str__(self):
        return {"realtime": "realtime", "fast": "fast"}.get(self.mode, f"x{self.speedup:g}")

    def environment(self) -> simpy.Environment:
        if self.mode == "fast":
            return simpy.Environment()
        return simpy.rt.RealtimeEnvironment(factor=0.001 / self.speedup, strict=False)


@dataclass(frozen=True)
class SimulationConfig:
    loss: float = 0.0
    delay_ms: float = 5.0
    jitter_ms: float = 2.0
    seed: int = 0
    pace: str = "fast"
    lead: Optional[int] = None  # ECG record channel; default first surface lead
    compression: bool = True
    samples_per_frame: int = 64
    decimation: int = dsp.DEFAULT_FACTOR
    window_len: int = dsp.DEFAULT_WINDOW
    k: int = 3
    theta: float = 0.8

    def link(self, device: int, direction: int) -> proto.LinkConfig:
        seed = int(np.random.SeedSequence([self.seed, device, direction]).generate_state(1, np.uint64)[0])
        return proto.LinkConfig(self.loss, self.delay_ms, self.jitter_ms, seed)


@dataclass
class SimulationResult:
    report: bytes
    actuator_log: str
    metrics: dict
    wall_latency_ms: list = field(default_factory=list)
    communicator: Optional[Communicator] = None


def _egm_channels(record: SignalRecord, samples_per_frame: int, compression: bool):
    chans = channels_of_kind(record.header, ChannelKind.IntracardiacEGM) or list(
        range(record.header.num_signals))
    spf = samples_per_frame
    while spf > 1:
        try:
            return chans, EmulatorConfig(record, chans, EGM_DEVICE_ID, compression, spf)
        except ValueError:
            spf //= 2
    raise ValueError("EGM record has too many channels for one frame")


def _data_losses(trace) -> tuple[int, int]:
    """Lost DATA sends on an uplink, split into first transmissions and retransmissions."""
    seen: set[int] = set()
    first = repeat = 0
    for _, arrival, kind, seq in trace:
        if kind != proto.MsgType.DATA:
            continue
        if arrival is None:
            if seq in seen:
                repeat += 1
            else:
                first += 1
        seen.add(seq)
    return first, repeat


def _percentiles(values) -> dict:
    if not values:
        return {"p50": None, "p99": None, "max": None}
    v = np.asarray(values, dtype=np.float64)
    return {"p50": round(float(np.percentile(v, 50)), 3), "p99": round(float(np.percentile(v, 99)), 3),
            "max": round(float(v.max()), 3)}


def run_simulation(ecg_record: SignalRecord, egm_record: Optional[SignalRecord], net: ann.Network,
                   config: SimulationConfig = SimulationConfig(),
                   report_stream: Optional[io.RawIOBase] = None) -> SimulationResult:
    pacing = Pacing.parse(config.pace)
    env = pacing.environment()
    lead = config.lead
    if lead is None:
        lead = (channels_of_kind(ecg_record.header, ChannelKind.SurfaceECG) or [0])[0]
    ecg_cfg = EmulatorConfig(ecg_record, (lead,), ECG_DEVICE_ID, config.compression,
                             config.samples_per_frame, config.decimation)
    devices = [ECG_DEVICE_ID, ACTUATOR_DEVICE_ID]
    egm_cfg = None
    if egm_record is not None:
        _, egm_cfg = _egm_channels(egm_record, config.samples_per_frame, config.compression)
        egm_cfg = EmulatorConfig(egm_record, egm_cfg.channels, EGM_DEVICE_ID, config.compression,
                                 egm_cfg.samples_per_frame, config.decimation)
        devices.insert(1, EGM_DEVICE_ID)
    links = {dev: (proto.SimLink(env, config.link(dev, 0), f"up{dev}"),
                   proto.SimLink(env, config.link(dev, 1), f"down{dev}")) for dev in devices}

    sensors = {ECG_DEVICE_ID: SensorEmulator(env, ecg_cfg, *links[ECG_DEVICE_ID])}
    if egm_cfg is not None:
        sensors[EGM_DEVICE_ID] = SensorEmulator(env, egm_cfg, *links[EGM_DEVICE_ID])
    actuator = ActuatorEmulator(env, *links[ACTUATOR_DEVICE_ID])
    stream = report_stream if report_stream is not None else io.BytesIO()
    sink = ReportSink(stream)
    comm = Communicator(env, net, links, sink, ecg_id=ECG_DEVICE_ID,
                        egm_id=EGM_DEVICE_ID if egm_cfg is not None else None,
                        actuator_id=ACTUATOR_DEVICE_ID, lead=0, window_len=config.window_len,
                        policy=DecisionPolicy(config.k, config.theta), seed=config.seed,
                        realtime=pacing.mode != "fast")
    env.run(until=comm.finished)
    actuator.close()
    for s in sensors.values():
        s.session.close()

    metrics = _metrics(comm, sensors, actuator, links, config, pacing)
    report = stream.getvalue() if isinstance(stream, io.BytesIO) else b""
    return SimulationResult(report, actuator.actuator.export_log(), metrics,
                            list(comm.stats.wall_latency_ms), comm)


def _metrics(comm: Communicator, sensors, actuator, links, config: SimulationConfig, pacing) -> dict:
    ecg = comm.streams[ECG_DEVICE_ID]
    w = comm.window_len
    sent = ecg.reassembler.descriptor.total_samples
    gap_samples = int(ecg.gap_mask.sum())
    classified = comm.stats.classified * w
    conserved = classified + comm.stats.skipped_outside_gaps + gap_samples + comm.stats.terminal
    links_out, losses, healed = {}, 0, 0
    for dev, (up, down) in links.items():
        for name, link in (("up", up), ("down", down)):
            links_out[f"{name}{dev}"] = {"sent": link.sent, "dropped": link.dropped}
        if dev in sensors:
            first, repeat = _data_losses(up.trace)
            links_out[f"up{dev}"].update(data_lost=first, retransmissions_lost=repeat)
            losses += first
    reassembly = {}
    for dev, st in comm.streams.items():
        r = st.reassembler
        healed += r.healed
        reassembly[str(dev)] = {"nacks": r.nacks_sent, "healed": r.healed, "gaps": len(r.gaps),
                                "gap_samples": int(st.gap_mask.sum()), "late": r.late,
                                "duplicates": r.duplicates}
    labels = {}
    for d in comm.decisions:
        labels[d.label.name] = labels.get(d.label.name, 0) + 1
    compression = {}
    for dev, s in sensors.items():
        compression[str(dev)] = round(s.stats.payload_bytes / s.stats.raw_bytes, 6) if s.stats.raw_bytes else None
    return {
        "pace": str(pacing),
        "windows": {"total": len(comm.window_usable), "classified": comm.stats.classified,
                    "skipped": comm.stats.skipped, "unusable": comm.window_usable.count(False)},
        "samples": {"sent": sent, "classified": classified,
                    "skipped_outside_gaps": comm.stats.skipped_outside_gaps,
                    "gap": gap_samples, "terminal": comm.stats.terminal,
                    "conserved": conserved == sent},
        "links": links_out,
        "reassembly": reassembly,
        "losses_injected": losses,
        "gaps_healed": healed,
        "retransmissions": {str(d): s.stats.retransmissions for d, s in sensors.items()},
        "sync_attempts": {str(d): r.attempts for d, r in sorted(comm.sync.items())},
        "decisions": labels,
        "commands": [{"ts_ms": c.issued_ms, "command": c.command.name, "triggers": list(c.triggers)}
                     for c in comm.commands],
        "sim_latency_ms": _percentiles(comm.stats.sim_latency_ms),
        "compression_ratio": compression,
        "actuator": {"final_state": actuator.actuator.state.value,
                     "log_entries": len(actuator.actuator.log), "rejected": actuator.rejected,
                     "decision_sends": comm.decision_sender.sends,
                     "abandoned": comm.decision_sender.abandoned},
        "report": {"lines": comm.sink.lines, "failures": comm.sink.failures},
        "malformed_frames": comm.malformed,
    }


def wall_latency_summary(result: SimulationResult, window_period_ms: float) -> dict:
    out = _percentiles(result.wall_latency_ms)
    out["window_period_ms"] = window_period_ms
    out["windows"] = len(result.wall_latency_ms)
    return out
