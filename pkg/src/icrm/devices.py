"""Emulated endpoints: the ECG monitor, the EGM sensor and the ICD/CRT actuator.

Each emulator is a simpy process owning one DeviceSession and talking to the
Communicator only through its pair of SimLinks. Simulated time is in ms.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import simpy

from . import dsp
from . import protocol as proto
from .labels import ClassLabel
from .protocol import Frame, MsgType, SimLink
from .signal_io import SampleRangeError, SignalRecord
from .synthetic import RhythmSpec, generate_synthetic, synthesize  # noqa: F401  re-exported

ECG_DEVICE_ID = 1
EGM_DEVICE_ID = 2
ACTUATOR_DEVICE_ID = 3
HEARTBEAT_MS = 1000.0
LINGER_MS = 3000.0
TOTAL_SAMPLES = struct.Struct("<I")


class UnknownCommand(ValueError):
    pass


# --------------------------------------------------------------------------- sensors


@dataclass(frozen=True)
class EmulatorConfig:
    record: SignalRecord = field(repr=False)
    channels: tuple[int, ...] = (0,)
    device_id: int = ECG_DEVICE_ID
    compression: bool = True
    samples_per_frame: int = 64
    decimation: int = dsp.DEFAULT_FACTOR

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        n = self.record.header.num_signals
        if not self.channels or any(not 0 <= c < n for c in self.channels):
            raise ValueError(f"channel indices {self.channels} invalid for a {n}-signal record")
        if self.samples_per_frame < 1 or self.decimation < 1:
            raise ValueError("samples_per_frame and decimation must be >= 1")
        nch = len(self.channels)
        raw = 2 * self.samples_per_frame * nch
        worst = nch * (dsp.BLOCK_HEADER.size + 3 * (self.samples_per_frame - 1))
        if (worst if self.compression else raw) > proto.MAX_PAYLOAD:
            raise ValueError(f"{nch} channels x {self.samples_per_frame} samples overflow the payload cap")

    @property
    def sampling_rate(self) -> float:
        return self.record.sampling_rate / self.decimation

    def stream(self) -> np.ndarray:
        """The int16 samples this device transmits: decimated, then quantized at the record gain."""
        rows = []
        for c in self.channels:
            sig = self.record.header.signals[c]
            x = dsp.decimate(self.record.channels[c], self.decimation, anti_alias=self.decimation > 1)
            raw = np.rint(x * sig.gain + sig.baseline)
            if raw.size and (raw.min() < -32768 or raw.max() > 32767):
                raise SampleRangeError(f"channel {c} exceeds the 16-bit range after decimation")
            rows.append(raw.astype(np.int16))
        return np.stack(rows)

    def descriptor(self) -> proto.StreamDescriptor:
        total = self.record.header.num_samples // self.decimation
        return proto.StreamDescriptor(self.sampling_rate, len(self.channels),
                                      self.samples_per_frame, total, self.compression)


@dataclass
class SensorStats:
    data_frames: int = 0
    heartbeats: int = 0
    retransmissions: int = 0
    unservable_nacks: int = 0
    payload_bytes: int = 0
    raw_bytes: int = 0


class SensorEmulator:
    """ECG monitor or EGM sensor: sync, then stream DATA frames at acquisition pace."""

    def __init__(self, env: simpy.Environment, config: EmulatorConfig, uplink: SimLink,
                 downlink: SimLink, heartbeat_ms: float = HEARTBEAT_MS, linger_ms: float = LINGER_MS):
        self.env = env
        self.config = config
        self.uplink = uplink
        self.downlink = downlink
        self.heartbeat_ms = heartbeat_ms
        self.linger_ms = linger_ms
        self.samples = config.stream()
        self.session = proto.DeviceSession(config.device_id, config.descriptor())
        self.stats = SensorStats()
        self.synced = env.event()
        self.done = env.event()
        self._listener = env.process(self._listen())
        self.process = env.process(self._run())

    def _listen(self):
        while self.session.state is not proto.SessionState.Closed:
            _, raw = yield self.downlink.inbox.get()
            try:
                frame = proto.decode_frame(raw)
            except proto.ProtocolError:
                continue
            if frame.device_id != self.config.device_id:
                continue
            if frame.msg_type is MsgType.SYNC:
                self.uplink.send(self.session.accept_sync(frame))
                if not self.synced.triggered:
                    self.synced.succeed()
            elif frame.msg_type is MsgType.NACK:
                again = self.session.retransmit(frame.seq)
                if again is None:
                    self.stats.unservable_nacks += 1
                else:
                    self.stats.retransmissions += 1
                    self.uplink.send(again)

    def _wait_until(self, t: float):
        if t > self.env.now:
            yield self.env.timeout(t - self.env.now)

    def _heartbeats(self, t0: float, stop: float):
        k = 1
        while t0 + k * self.heartbeat_ms <= stop:
            yield from self._wait_until(t0 + k * self.heartbeat_ms)
            if self.session.state is not proto.SessionState.Streaming:
                return
            sent = min(self.session.frames_sent * self.config.samples_per_frame,
                       self.session.descriptor.total_samples)
            self.uplink.send(self.session.heartbeat(int(k * self.heartbeat_ms),
                                                    TOTAL_SAMPLES.pack(sent)))
            self.stats.heartbeats += 1
            k += 1

    def _run(self):
        yield self.synced
        yield from self._wait_until(float(self.session.epoch_ms))
        desc = self.session.descriptor
        t0 = self.env.now
        period = 1000.0 / desc.sampling_rate
        end = t0 + desc.total_samples * period
        self.env.process(self._heartbeats(t0, end + self.linger_ms))
        for k in range(desc.n_frames):
            a, b = desc.frame_range(k)
            # a frame leaves once its last sample has been acquired
            yield from self._wait_until(t0 + b * period)
            payload = proto.encode_samples(self.samples[:, a:b], desc.compressed)
            self.stats.payload_bytes += len(payload)
            self.stats.raw_bytes += 2 * self.samples[:, a:b].size
            self.uplink.send(self.session.data(payload, int(round(a * period))))
            self.stats.data_frames += 1
        yield from self._wait_until(end)
        self.uplink.send(self.session.data(b"", int(round(desc.total_samples * period))))
        yield from self._wait_until(end + self.linger_ms)
        self.session.close()
        self.done.succeed()


# --------------------------------------------------------------------------- actuator


class ActuatorState(enum.Enum):
    Idle = "Idle"
    Pacing = "Pacing"
    ShockArmed = "ShockArmed"
    ShockDelivered = "ShockDelivered"


class Command(enum.IntEnum):
    StandDown = 1
    Pace = 2
    ArmShock = 3
    ConfirmShock = 4


DECISION_HEAD = struct.Struct("<BBfB")  # command, label, confidence, trigger count


def encode_decision(command: Command, label: ClassLabel, confidence: float,
                    triggers: Sequence[int]) -> bytes:
    return DECISION_HEAD.pack(int(command), int(label), confidence, len(triggers)) + \
        struct.pack(f"<{len(triggers)}I", *triggers)


def decode_decision(payload: bytes) -> tuple[int, int, float, tuple[int, ...]]:
    """Raw fields; the command byte is validated by the actuator, not here."""
    if len(payload) < DECISION_HEAD.size:
        raise proto.BadPayload("DECISION payload too short")
    cmd, label, conf, n = DECISION_HEAD.unpack_from(payload)
    if len(payload) != DECISION_HEAD.size + 4 * n:
        raise proto.BadPayload("DECISION trigger list length mismatch")
    return cmd, label, conf, struct.unpack_from(f"<{n}I", payload, DECISION_HEAD.size)


@dataclass(frozen=True)
class LogEntry:
    timestamp_ms: int
    command: Command
    prior: ActuatorState
    new: ActuatorState

    def line(self) -> str:
        return f"{self.timestamp_ms},{self.command.name},{self.prior.value},{self.new.value}"


class Actuator:
    """ICD/CRT state machine. Every accepted command is logged, refused ones included."""

    def __init__(self):
        self.state = ActuatorState.Idle
        self.log: list[LogEntry] = []

    @staticmethod
    def transition(state: ActuatorState, command: Command) -> ActuatorState:
        if command is Command.StandDown:
            return ActuatorState.Idle
        if command is Command.Pace:
            return ActuatorState.Pacing
        if command is Command.ArmShock:
            return ActuatorState.ShockArmed
        # delivery needs a prior arming; otherwise the command is refused
        return ActuatorState.ShockDelivered if state is ActuatorState.ShockArmed else state

    def apply(self, command, timestamp_ms: int) -> ActuatorState:
        try:
            cmd = Command(command)
        except ValueError:
            raise UnknownCommand(f"command byte {command!r}") from None
        prior = self.state
        self.state = self.transition(prior, cmd)
        self.log.append(LogEntry(int(timestamp_ms), cmd, prior, self.state))
        return self.state

    def export_log(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)


class ActuatorEmulator:
    """Applies DECISION frames strictly in seq order and acknowledges cumulatively.

    The acknowledgement is a HEARTBEAT whose seq is the next DECISION seq expected.
    """

    def __init__(self, env: simpy.Environment, uplink: SimLink, downlink: SimLink,
                 device_id: int = ACTUATOR_DEVICE_ID):
        self.env = env
        self.uplink = uplink
        self.downlink = downlink
        self.device_id = device_id
        self.actuator = Actuator()
        self.session = proto.DeviceSession(device_id, proto.StreamDescriptor(1000.0, 0, 1, 0, False))
        self.expected = 0
        self.rejected = 0
        self.duplicates = 0
        self._pending: dict[int, Frame] = {}
        self.process = env.process(self._listen())

    def _now_ms(self) -> int:
        epoch = self.session.epoch_ms or 0
        return max(0, math.floor(self.env.now - epoch))

    def _listen(self):
        while self.session.state is not proto.SessionState.Closed:
            _, raw = yield self.downlink.inbox.get()
            try:
                frame = proto.decode_frame(raw)
            except proto.ProtocolError:
                continue
            if frame.device_id != self.device_id:
                continue
            if frame.msg_type is MsgType.SYNC:
                self.uplink.send(self.session.accept_sync(frame))
            elif frame.msg_type is MsgType.DECISION and self.session.state is proto.SessionState.Streaming:
                self._receive(frame)
                self.uplink.send(proto.encode_frame(Frame(self.device_id, MsgType.HEARTBEAT,
                                                          self.expected % proto.SEQ_MOD,
                                                          self._now_ms())))

    def _receive(self, frame: Frame):
        d = proto.seq_distance(frame.seq, self.expected % proto.SEQ_MOD)
        if d < 0 or (self.expected + d) in self._pending:
            self.duplicates += 1
            return
        self._pending[self.expected + d] = frame
        while self.expected in self._pending:
            self._apply(self._pending.pop(self.expected))
            self.expected += 1

    def _apply(self, frame: Frame):
        try:
            cmd, _, _, _ = decode_decision(frame.payload)
            self.actuator.apply(cmd, self._now_ms())
        except (UnknownCommand, proto.BadPayload):
            self.rejected += 1

    def close(self):
        self.session.close()
