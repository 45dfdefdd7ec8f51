"""The Communicator: reassembly, alignment, windowed classification, debounced
decisions, actuator commands and the hospital report stream.

All timestamps are simulated milliseconds since the shared sync epoch.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence

import numpy as np
import simpy

from . import ann, dsp
from . import protocol as proto
from .devices import ActuatorState, Command, encode_decision, Actuator
from .labels import ClassLabel, N_CLASSES
from .protocol import Frame, MsgType, SimLink

log = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_THETA = 0.8
EPOCH_LEAD_MS = 1500.0
DECISION_RETRY_MS = 250.0
DECISION_MAX_SENDS = 20


class ModelNotLoaded(RuntimeError):
    pass


class EpochMismatch(ValueError):
    pass


class SinkFailure(OSError):
    pass


@dataclass(frozen=True)
class Decision:
    window_index: int
    start_ms: float
    stop_ms: float
    label: ClassLabel
    confidence: float
    probabilities: tuple[float, ...]


@dataclass(frozen=True)
class ActuationCommand:
    command: Command
    triggers: tuple[int, ...]
    issued_ms: int


# --------------------------------------------------------------------------- classification


def process_window(net: Optional[ann.Network], samples, window_index: int = 0,
                   start_ms: float = 0.0, stop_ms: float = 0.0) -> Decision:
    """normalize, classify, wrap. Raw ADC codes are fine: z-scoring removes gain and baseline."""
    if net is None:
        raise ModelNotLoaded("no trained network loaded")
    x = dsp.normalize(np.asarray(samples, dtype=np.float64))
    p = ann.forward(net, x)
    k = int(np.argmax(p))
    probs = tuple(float(v) for v in p) + (0.0,) * (N_CLASSES - p.size)
    return Decision(window_index, start_ms, stop_ms, ClassLabel(k), float(p[k]), probs)


class DecisionPolicy:
    """Issue a command after K consecutive identical labels at confidence >= theta.

    A skipped window, a low-confidence decision or a different label restarts
    the run; issuing a command restarts it too.
    """

    def __init__(self, k: int = DEFAULT_K, theta: float = DEFAULT_THETA):
        if k < 1 or not 0.0 < theta <= 1.0:
            raise ValueError("need k >= 1 and 0 < theta <= 1")
        self.k = k
        self.theta = theta
        self.mode = ActuatorState.Idle
        self._label: Optional[ClassLabel] = None
        self._run: list[int] = []

    def skip(self):
        self._label, self._run = None, []

    def _command_for(self, label: ClassLabel) -> Optional[Command]:
        if label is ClassLabel.NSR:
            return Command.StandDown if self.mode is not ActuatorState.Idle else None
        if label is ClassLabel.AFL:
            return Command.Pace if self.mode is not ActuatorState.Pacing else None
        return Command.ConfirmShock if self.mode is ActuatorState.ShockArmed else Command.ArmShock

    def update(self, decision: Optional[Decision], now_ms: int = 0) -> Optional[ActuationCommand]:
        if decision is None or decision.confidence < self.theta:
            self.skip()
            return None
        if decision.label is self._label:
            self._run.append(decision.window_index)
        else:
            self._label, self._run = decision.label, [decision.window_index]
        if len(self._run) < self.k:
            return None
        cmd = self._command_for(decision.label)
        if cmd is None:
            return None
        triggers = tuple(self._run[-self.k:])
        self._run = []
        self.mode = Actuator.transition(self.mode, cmd)
        return ActuationCommand(cmd, triggers, now_ms)


# --------------------------------------------------------------------------- reports


def decision_line(ts_ms: int, device_ids: str, d: Decision) -> str:
    p = ";".join(f"{v:.6f}" for v in d.probabilities)
    return f"{ts_ms};{device_ids};{d.window_index};{d.label.name};{d.confidence:.6f};{p}"


def command_line(c: ActuationCommand) -> str:
    return f"{c.issued_ms};COMMAND;{c.command.name};{','.join(map(str, c.triggers))}"


class ReportSink:
    """Append-only ASCII line sink. Write failures are logged and counted, never raised."""

    def __init__(self, stream: BinaryIO):
        self.stream = stream
        self.lines = 0
        self.failures = 0
        self._last_ts: Optional[int] = None

    def append(self, line: str, ts_ms: int):
        if self._last_ts is not None and ts_ms < self._last_ts:
            raise ValueError("report timestamps must be monotone")
        self._last_ts = ts_ms
        try:
            self.stream.write(line.encode("ascii") + b"\n")
            self.stream.flush()
            self.lines += 1
        except Exception as exc:  # the uplink must never stall actuation
            self.failures += 1
            log.warning("report sink failure: %s", SinkFailure(str(exc)))


def emit_report(sink: ReportSink, device_ids: str, decision: Decision, ts_ms: int,
                command: Optional[ActuationCommand] = None):
    sink.append(decision_line(ts_ms, device_ids, decision), ts_ms)
    if command is not None:
        sink.append(command_line(command), command.issued_ms)


# --------------------------------------------------------------------------- alignment


@dataclass(frozen=True)
class StreamCapture:
    """A reassembled stream: samples with gap positions marked."""

    sampling_rate: float
    epoch_ms: float
    samples: np.ndarray  # (n_channels, n)
    gap_mask: np.ndarray  # (n,) True where samples were lost


@dataclass(frozen=True)
class AlignedTimeline:
    times_ms: np.ndarray
    ecg: np.ndarray
    egm: np.ndarray  # EGM resampled onto the ECG grid by nearest earlier sample
    usable: np.ndarray  # per window
    skew_ms: float
    window_len: int


def usable_windows(gap_mask: np.ndarray, window_len: int) -> np.ndarray:
    n = gap_mask.size // window_len
    return ~gap_mask[: n * window_len].reshape(n, window_len).any(axis=1)


def align_streams(ecg: StreamCapture, egm: StreamCapture,
                  window_len: int = dsp.DEFAULT_WINDOW) -> AlignedTimeline:
    if ecg.epoch_ms != egm.epoch_ms:
        raise EpochMismatch(f"epochs {ecg.epoch_ms} and {egm.epoch_ms} differ")
    n = ecg.samples.shape[1]
    t = np.arange(n) * 1000.0 / ecg.sampling_rate
    idx = np.floor(t * egm.sampling_rate / 1000.0 + 1e-9).astype(np.int64)
    idx = np.clip(idx, 0, max(egm.samples.shape[1] - 1, 0))
    egm_on_grid = egm.samples[:, idx] if egm.samples.shape[1] else np.zeros((egm.samples.shape[0], n))
    skew = float(np.max(np.abs(t - idx * 1000.0 / egm.sampling_rate))) if n else 0.0
    return AlignedTimeline(t, ecg.samples, egm_on_grid, usable_windows(ecg.gap_mask, window_len),
                           skew, window_len)


# --------------------------------------------------------------------------- live communicator


@dataclass
class WindowStats:
    classified: int = 0
    skipped: int = 0
    skipped_outside_gaps: int = 0  # samples of skipped windows not themselves lost
    terminal: int = 0
    sim_latency_ms: list = field(default_factory=list)
    wall_latency_ms: list = field(default_factory=list)


class _StreamState:
    def __init__(self, descriptor: proto.StreamDescriptor):
        self.reassembler = proto.Reassembler(descriptor)
        self.samples = np.zeros((descriptor.n_channels, descriptor.total_samples), dtype=np.int16)
        self.gap_mask = np.zeros(descriptor.total_samples, dtype=bool)
        self.frontier = 0  # samples known (delivered or gap-final)
        self.ended = False


class _ReliableSender:
    """DECISION frames to the actuator, resent until cumulatively acknowledged."""

    def __init__(self, env, link: SimLink, device_id: int):
        self.env, self.link, self.device_id = env, link, device_id
        self.next_seq = 0
        self.acked = 0
        self.unacked: dict[int, bytes] = {}
        self.sends = 0
        self.abandoned = 0

    def send(self, payload: bytes, ts_ms: int):
        seq = self.next_seq
        raw = proto.encode_frame(Frame(self.device_id, MsgType.DECISION, seq % proto.SEQ_MOD, ts_ms,
                                       payload))
        self.unacked[seq] = raw
        self.next_seq += 1
        self.env.process(self._deliver(seq, raw))

    def _deliver(self, seq, raw):
        for _ in range(DECISION_MAX_SENDS):
            if seq not in self.unacked:
                return
            self.link.send(raw)
            self.sends += 1
            yield self.env.timeout(DECISION_RETRY_MS)
        if self.unacked.pop(seq, None) is not None:
            self.abandoned += 1

    def on_ack(self, frame: Frame):
        upto = self.acked + proto.seq_distance(frame.seq, self.acked % proto.SEQ_MOD)
        for s in range(self.acked, max(upto, self.acked)):
            self.unacked.pop(s, None)
        self.acked = max(self.acked, upto)

    @property
    def idle(self) -> bool:
        return not self.unacked


class Communicator:
    """Simpy-driven Communicator for one ECG stream, one EGM stream and the actuator."""

    def __init__(self, env: simpy.Environment, net: Optional[ann.Network],
                 links: dict[int, tuple[SimLink, SimLink]], sink: ReportSink, *,
                 ecg_id: int, egm_id: Optional[int], actuator_id: int, lead: int = 0,
                 window_len: int = dsp.DEFAULT_WINDOW, policy: Optional[DecisionPolicy] = None,
                 seed: int = 0, realtime: bool = False, drain_ms: float = 10_000.0):
        if net is None:
            raise ModelNotLoaded("the Communicator needs a trained network")
        self.env = env
        self.net = net
        self.links = links  # device id -> (uplink into us, downlink out of us)
        self.sink = sink
        self.ecg_id, self.egm_id, self.actuator_id = ecg_id, egm_id, actuator_id
        self.lead = lead
        self.window_len = window_len
        self.policy = policy or DecisionPolicy()
        self.realtime = realtime
        self.drain_ms = drain_ms  # give up on a silent stream this long after its nominal end
        self.device_ids = "+".join(str(i) for i in (ecg_id, egm_id) if i is not None)
        tokens = np.random.default_rng([seed, 0x5CC]).integers(1, 2**32, size=len(links))
        self.tokens = {dev: int(t) for dev, t in zip(sorted(links), tokens)}
        self.epoch_ms: Optional[float] = None
        self.sync: dict[int, proto.SyncResult] = {}
        self.streams: dict[int, _StreamState] = {}
        self.decisions: list[Decision] = []
        self.commands: list[ActuationCommand] = []
        self.window_usable: list[bool] = []
        self.stats = WindowStats()
        self.next_window = 0
        self.malformed = 0
        self.finished = env.event()
        self._acks = {dev: simpy.Store(env) for dev in links}
        self._sender = _ReliableSender(env, links[actuator_id][1], actuator_id)
        self._window_ready_wall: dict[int, float] = {}
        for dev in links:
            env.process(self._receive(dev))
        self.process = env.process(self._run())

    # ---- time helpers
    def now_ms(self) -> int:
        return max(0, math.floor(self.env.now - (self.epoch_ms or 0.0)))

    def _wall_lag_ms(self) -> float:
        """How far the realtime clock runs ahead of the simulated one."""
        if not self.realtime:
            return 0.0
        env = self.env
        ideal = env.real_start + (env.now - env.env_start) * env.factor
        return max(0.0, (time.monotonic() - ideal) * 1000.0)

    # ---- processes
    def _run(self):
        start = self.env.now
        self.epoch_ms = start + EPOCH_LEAD_MS
        procs = {dev: self.env.process(proto.initiate_sync(
            self.env, self.links[dev][1], self._acks[dev], dev, self.tokens[dev], int(self.epoch_ms)))
            for dev in sorted(self.links)}
        for dev, p in procs.items():
            self.sync[dev] = yield p
            if dev != self.actuator_id:
                self.streams[dev] = _StreamState(self.sync[dev].descriptor)
        if self.egm_id is not None:
            a, b = self.sync[self.ecg_id].descriptor, self.sync[self.egm_id].descriptor
            if a.sampling_rate != b.sampling_rate:
                log.info("ECG at %s Hz, EGM at %s Hz; EGM placed on the ECG grid", a.sampling_rate,
                         b.sampling_rate)
        cap = self.epoch_ms + max(
            s.reassembler.descriptor.sample_time_ms(s.reassembler.descriptor.total_samples)
            for s in self.streams.values()) + self.drain_ms
        while not all(s.ended for s in self.streams.values()) and self.env.now < cap:
            yield self.env.timeout(100.0)
        for dev, s in self.streams.items():
            if not s.ended:
                s.reassembler.finish(self.env.now)
                self._absorb(dev)
        self._finish_windows(final=True)
        while not self._sender.idle:
            yield self.env.timeout(DECISION_RETRY_MS)
        self.finished.succeed()

    def _receive(self, dev: int):
        uplink, downlink = self.links[dev]
        while True:
            _, raw = yield uplink.inbox.get()
            try:
                frame = proto.decode_frame(raw)
            except proto.ProtocolError:
                self.malformed += 1
                continue
            if frame.device_id != dev:
                self.malformed += 1
                continue
            if frame.msg_type is MsgType.SYNC_ACK:
                self._acks[dev].put(frame)
                continue
            if dev == self.actuator_id:
                if frame.msg_type is MsgType.HEARTBEAT:
                    self._sender.on_ack(frame)
                continue
            state = self.streams.get(dev)
            if state is None or state.ended:
                continue
            r = state.reassembler
            now = self.env.now
            r.expire(now)
            try:
                if frame.msg_type is MsgType.DATA:
                    nacks = r.on_data(frame, now)
                elif frame.msg_type is MsgType.HEARTBEAT:
                    nacks = r.on_heartbeat(frame, now)
                else:
                    nacks = []
            except proto.BadPayload:
                self.malformed += 1
                nacks = []
            for seq in nacks:
                downlink.send(proto.nack_frame(dev, seq, self.now_ms()))
            self._absorb(dev)
            deadline = r.next_deadline
            if deadline is not None:
                ev = self.env.timeout(max(0.0, deadline - now))
                ev.callbacks.append(lambda _e, d=dev: self._on_deadline(d))

    def _on_deadline(self, dev: int):
        state = self.streams[dev]
        if not state.ended:
            state.reassembler.expire(self.env.now)
            self._absorb(dev)

    def _absorb(self, dev: int):
        state = self.streams[dev]
        for ev in state.reassembler.pop_events():
            if isinstance(ev, proto.Chunk):
                n = ev.samples.shape[1]
                state.samples[:, ev.start:ev.start + n] = ev.samples
                state.frontier = ev.start + n
            elif isinstance(ev, proto.GapReport):
                state.gap_mask[ev.start:ev.stop] = True
                state.frontier = ev.stop
            else:
                state.frontier = ev.total_samples
                state.ended = True
        if dev == self.ecg_id:
            self._finish_windows()

    # ---- windows
    def _finish_windows(self, final: bool = False):
        state = self.streams[self.ecg_id]
        w = self.window_len
        period = 1000.0 / state.reassembler.descriptor.sampling_rate
        while (self.next_window + 1) * w <= state.frontier:
            k = self.next_window
            a, b = k * w, (k + 1) * w
            ts = self.now_ms()
            if state.gap_mask[a:b].any():
                self.window_usable.append(False)
                self.stats.skipped += 1
                self.stats.skipped_outside_gaps += int((~state.gap_mask[a:b]).sum())
                self.policy.skip()
            else:
                t_wall = time.perf_counter()
                lag = self._wall_lag_ms()
                d = process_window(self.net, state.samples[self.lead, a:b], k, a * period, b * period)
                self.window_usable.append(True)
                self.decisions.append(d)
                self.stats.classified += 1
                self.stats.sim_latency_ms.append(ts - b * period)
                cmd = self.policy.update(d, ts)
                self.sink.append(decision_line(ts, self.device_ids, d), ts)
                if cmd is not None:
                    self.commands.append(cmd)
                    self._sender.send(encode_decision(cmd.command, d.label, d.confidence, cmd.triggers),
                                      ts)
                    self.sink.append(command_line(cmd), ts)
                self.stats.wall_latency_ms.append(lag + (time.perf_counter() - t_wall) * 1000.0)
            self.next_window += 1
        if final:
            self.stats.terminal = state.frontier - self.next_window * w

    @property
    def ecg_capture(self) -> StreamCapture:
        s = self.streams[self.ecg_id]
        return StreamCapture(s.reassembler.descriptor.sampling_rate, self.epoch_ms, s.samples,
                             s.gap_mask)

    @property
    def egm_capture(self) -> Optional[StreamCapture]:
        if self.egm_id is None:
            return None
        s = self.streams[self.egm_id]
        return StreamCapture(s.reassembler.descriptor.sampling_rate, self.epoch_ms, s.samples,
                             s.gap_mask)

    @property
    def decision_sender(self) -> _ReliableSender:
        return self._sender
