"""Wire protocol between the device emulators and the Communicator.

Framing and CRC, the SYNC handshake, device-side sessions with a retransmit
buffer, receiver-side reassembly with NACK-driven repair, and a seeded lossy
link standing in for the radios.
"""
from __future__ import annotations

import enum
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import simpy

from . import dsp, kernels

MAGIC = b"CG"
VERSION = 0x01
MAX_PAYLOAD = 1024
HEADER = struct.Struct("<2sBBBHIH")
CRC = struct.Struct("<H")
MIN_FRAME = HEADER.size + CRC.size  # 13

SEQ_MOD = 1 << 16
SEQ_HALF = 1 << 15
RETRANSMIT_DEPTH = 64
GAP_DEADLINE_MS = 500.0
SYNC_RETRIES = 5
SYNC_INTERVAL_MS = 200.0


class MsgType(enum.IntEnum):
    SYNC = 1
    SYNC_ACK = 2
    DATA = 3
    NACK = 4
    DECISION = 5
    HEARTBEAT = 6


class ProtocolError(Exception):
    pass


class BadMagic(ProtocolError):
    pass


class BadCrc(ProtocolError):
    pass


class BadLength(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class UnknownMsgType(ProtocolError):
    pass


class BadPayload(ProtocolError):
    """Frame decoded but its payload does not match the stream descriptor."""


class SyncTimeout(ProtocolError):
    pass


class TokenMismatch(ProtocolError):
    pass


class SeqWrapAmbiguity(ProtocolError):
    pass


class SessionStateError(ProtocolError):
    pass


class LinkClosed(ProtocolError):
    pass


# --------------------------------------------------------------------------- frames


@dataclass(frozen=True)
class Frame:
    device_id: int
    msg_type: MsgType
    seq: int = 0
    timestamp_ms: int = 0
    payload: bytes = b""
    version: int = VERSION

    def __post_init__(self):
        for name, value, top in (("device_id", self.device_id, 0xFF), ("seq", self.seq, 0xFFFF),
                                 ("timestamp_ms", self.timestamp_ms, 0xFFFFFFFF),
                                 ("version", self.version, 0xFF)):
            if not 0 <= value <= top:
                raise ValueError(f"{name}={value} out of range")
        if len(self.payload) > MAX_PAYLOAD:
            raise BadLength(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "payload", bytes(self.payload))


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor."""
    return kernels.crc16_ccitt(bytes(data), 0xFFFF)


def encode_frame(frame: Frame) -> bytes:
    head = HEADER.pack(MAGIC, frame.version, frame.device_id, int(frame.msg_type),
                       frame.seq, frame.timestamp_ms, len(frame.payload))
    body = head + frame.payload
    return body + CRC.pack(crc16(body))


def decode_frame(buf: bytes) -> Frame:
    """Parse one complete frame; the buffer must hold exactly that frame.

    Magic is checked before the CRC so that any corrupted byte is reported as
    either ``BadMagic`` (first two bytes) or ``BadCrc`` (everything else).
    """
    buf = bytes(buf)
    if len(buf) < MIN_FRAME:
        raise BadLength(f"{len(buf)} bytes is shorter than the {MIN_FRAME}-byte minimum")
    if buf[:2] != MAGIC:
        raise BadMagic(f"magic {buf[:2].hex()}")
    (expect,) = CRC.unpack_from(buf, len(buf) - CRC.size)
    if crc16(buf[:-CRC.size]) != expect:
        raise BadCrc("checksum mismatch")
    _, version, device_id, msg_type, seq, ts, plen = HEADER.unpack_from(buf)
    if plen > MAX_PAYLOAD:
        raise BadLength(f"payload_len {plen} exceeds {MAX_PAYLOAD}")
    if plen != len(buf) - MIN_FRAME:
        raise BadLength(f"payload_len {plen} but {len(buf) - MIN_FRAME} payload bytes present")
    if version != VERSION:
        raise BadVersion(f"version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise UnknownMsgType(f"message type {msg_type}") from None
    return Frame(device_id, kind, seq, ts, buf[HEADER.size:-CRC.size], version)


class StreamDecoder:
    """Recover frames from a byte stream, resynchronizing on the magic after garbage."""

    def __init__(self):
        self._buf = bytearray()
        self.discarded = 0

    def feed(self, data: bytes) -> list[Frame]:
        self._buf.extend(data)
        out = []
        while True:
            start = self._buf.find(MAGIC)
            if start < 0:
                keep = 1 if self._buf[-1:] == MAGIC[:1] else 0
                self.discarded += len(self._buf) - keep
                del self._buf[: len(self._buf) - keep]
                return out
            if start:
                self.discarded += start
                del self._buf[:start]
            if len(self._buf) < HEADER.size:
                return out
            plen = HEADER.unpack_from(self._buf)[-1]
            if plen > MAX_PAYLOAD:
                self._skip()
                continue
            total = MIN_FRAME + plen
            if len(self._buf) < total:
                return out
            try:
                out.append(decode_frame(self._buf[:total]))
            except ProtocolError:
                self._skip()
                continue
            del self._buf[:total]

    def _skip(self):
        self.discarded += 1
        del self._buf[:1]


# --------------------------------------------------------------------------- payloads


SYNC_PAYLOAD = struct.Struct("<II")  # token, epoch (sim ms at which stream time 0 begins)
DESCRIPTOR = struct.Struct("<IIBBHI")  # token, rate in mHz, channels, flags, samples/frame, total
FLAG_COMPRESSED = 0x01


@dataclass(frozen=True)
class StreamDescriptor:
    """What a device announces in SYNC_ACK about the stream it will send."""

    sampling_rate: float
    n_channels: int
    samples_per_frame: int
    total_samples: int
    compressed: bool = True

    @property
    def n_frames(self) -> int:
        return -(-self.total_samples // self.samples_per_frame)

    def frame_range(self, index: int) -> tuple[int, int]:
        """Sample range [start, stop) carried by DATA frame ``index`` (unwrapped)."""
        start = index * self.samples_per_frame
        return start, min(start + self.samples_per_frame, self.total_samples)

    def sample_time_ms(self, sample: int) -> float:
        return sample * 1000.0 / self.sampling_rate

    def pack(self, token: int) -> bytes:
        return DESCRIPTOR.pack(token, int(round(self.sampling_rate * 1000)), self.n_channels,
                               FLAG_COMPRESSED if self.compressed else 0,
                               self.samples_per_frame, self.total_samples)

    @classmethod
    def unpack(cls, payload: bytes) -> tuple[int, "StreamDescriptor"]:
        if len(payload) != DESCRIPTOR.size:
            raise BadPayload(f"SYNC_ACK payload of {len(payload)} bytes")
        token, mhz, nch, flags, spf, total = DESCRIPTOR.unpack(payload)
        if mhz == 0 or spf == 0:
            raise BadPayload("degenerate stream descriptor")
        return token, cls(mhz / 1000.0, nch, spf, total, bool(flags & FLAG_COMPRESSED))


def encode_samples(block: np.ndarray, compressed: bool) -> bytes:
    """Channel-major payload: one codec block per channel, or raw int16 LE."""
    block = np.asarray(block, dtype=np.int16)
    if compressed:
        return b"".join(dsp.compress(ch).to_bytes() for ch in block)
    return block.astype("<i2").tobytes()


def decode_samples(payload: bytes, n_channels: int, n_samples: int, compressed: bool) -> np.ndarray:
    if compressed:
        rows, offset = [], 0
        try:
            for _ in range(n_channels):
                samples, offset = dsp.decode_block(payload, offset)
                rows.append(samples)
        except dsp.CodecError as exc:
            raise BadPayload(str(exc)) from exc
        if offset != len(payload) or any(len(r) != n_samples for r in rows):
            raise BadPayload("compressed payload does not match the descriptor")
        return np.stack(rows)
    if len(payload) != 2 * n_channels * n_samples:
        raise BadPayload(f"raw payload of {len(payload)} bytes, expected {2 * n_channels * n_samples}")
    return np.frombuffer(payload, dtype="<i2").reshape(n_channels, n_samples).astype(np.int16)


def seq_distance(seq: int, reference: int) -> int:
    """Signed distance from ``reference`` to ``seq`` modulo 2^16.

    Raises SeqWrapAmbiguity when the two are exactly half the sequence space
    apart, where ahead and behind cannot be told apart.
    """
    d = (seq - reference) % SEQ_MOD
    if d == SEQ_HALF:
        raise SeqWrapAmbiguity(f"seq {seq} is 2^15 away from {reference}")
    return d - SEQ_MOD if d > SEQ_HALF else d


# --------------------------------------------------------------------------- device session


class SessionState(enum.Enum):
    AwaitSync = "await_sync"
    Streaming = "streaming"
    Closed = "closed"


class DeviceSession:
    """Device side of one link: sync state, DATA sequencing and the retransmit buffer."""

    def __init__(self, device_id: int, descriptor: StreamDescriptor, depth: int = RETRANSMIT_DEPTH):
        self.device_id = device_id
        self.descriptor = descriptor
        self.state = SessionState.AwaitSync
        self.token: Optional[int] = None
        self.epoch_ms: Optional[int] = None
        self.frames_sent = 0  # unwrapped DATA count
        self._buffer: OrderedDict[int, bytes] = OrderedDict()
        self._depth = depth

    @property
    def next_seq(self) -> int:
        return self.frames_sent % SEQ_MOD

    def accept_sync(self, frame: Frame) -> bytes:
        """Answer a SYNC. A repeated SYNC with the same token is re-acknowledged."""
        if frame.msg_type is not MsgType.SYNC or len(frame.payload) != SYNC_PAYLOAD.size:
            raise BadPayload("not a well-formed SYNC")
        token, epoch = SYNC_PAYLOAD.unpack(frame.payload)
        if self.state is SessionState.Closed:
            raise SessionStateError("session closed")
        if self.state is SessionState.Streaming and token != self.token:
            raise TokenMismatch(f"already synced with token {self.token:#x}")
        self.token, self.epoch_ms = token, epoch
        self.state = SessionState.Streaming
        return encode_frame(Frame(self.device_id, MsgType.SYNC_ACK, 0, 0,
                                  self.descriptor.pack(token)))

    def data(self, payload: bytes, timestamp_ms: int) -> bytes:
        if self.state is not SessionState.Streaming:
            raise SessionStateError(f"DATA not allowed in state {self.state.name}")
        seq = self.next_seq
        raw = encode_frame(Frame(self.device_id, MsgType.DATA, seq, timestamp_ms, payload))
        self._buffer[seq] = raw
        self._buffer.move_to_end(seq)
        while len(self._buffer) > self._depth:
            self._buffer.popitem(last=False)
        self.frames_sent += 1
        return raw

    def heartbeat(self, timestamp_ms: int, payload: bytes = b"") -> bytes:
        """HEARTBEAT carries the next DATA seq so a receiver can spot trailing losses."""
        if self.state is not SessionState.Streaming:
            raise SessionStateError(f"HEARTBEAT not allowed in state {self.state.name}")
        return encode_frame(Frame(self.device_id, MsgType.HEARTBEAT, self.next_seq,
                                  timestamp_ms, payload))

    def retransmit(self, seq: int) -> Optional[bytes]:
        return self._buffer.get(seq)

    def close(self):
        self.state = SessionState.Closed


def nack_frame(device_id: int, seq: int, timestamp_ms: int) -> bytes:
    return encode_frame(Frame(device_id, MsgType.NACK, seq, timestamp_ms))


def sync_frame(device_id: int, token: int, epoch_ms: int, attempt: int = 0) -> bytes:
    return encode_frame(Frame(device_id, MsgType.SYNC, attempt, 0, SYNC_PAYLOAD.pack(token, epoch_ms)))


# --------------------------------------------------------------------------- reassembly


@dataclass(frozen=True)
class Chunk:
    index: int  # unwrapped frame index
    start: int  # first sample index
    samples: np.ndarray = field(repr=False)  # (n_channels, n) int16


@dataclass(frozen=True)
class GapReport:
    index: int
    start: int
    stop: int
    detected_ms: float
    finalized_ms: float

    @property
    def n_samples(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class EndOfStream:
    total_samples: int


@dataclass
class _Missing:
    detected_ms: float
    deadline_ms: float


class Reassembler:
    """Receiver side of one device stream.

    Emits ``Chunk``, ``GapReport`` and finally ``EndOfStream`` events strictly in
    frame order. Each missing frame is NACKed once at detection and becomes a
    gap if still absent ``deadline_ms`` later.
    """

    def __init__(self, descriptor: StreamDescriptor, deadline_ms: float = GAP_DEADLINE_MS):
        self.descriptor = descriptor
        self.deadline_ms = deadline_ms
        self.next_index = 0  # first frame not yet emitted
        self.highest_seen = -1
        self.ended = False
        self._received: dict[int, np.ndarray] = {}
        self._missing: dict[int, _Missing] = {}
        self._events: list = []
        self.nacks_sent = 0
        self.healed = 0
        self.duplicates = 0
        self.late = 0
        self.gaps: list[GapReport] = []
        self._gap_indices: set[int] = set()

    @property
    def terminator_index(self) -> int:
        return self.descriptor.n_frames

    def _unwrap(self, seq: int) -> int:
        return self.next_index + seq_distance(seq, self.next_index % SEQ_MOD)

    def _register_up_to(self, index: int, now: float) -> list[int]:
        """Mark frames between the highest seen and ``index`` (exclusive) as missing."""
        nacks = []
        for k in range(max(self.highest_seen + 1, self.next_index), index):
            if k not in self._received and k not in self._missing:
                self._missing[k] = _Missing(now, now + self.deadline_ms)
                nacks.append(k % SEQ_MOD)
        self.nacks_sent += len(nacks)
        self.highest_seen = max(self.highest_seen, index - 1)
        return nacks

    def on_data(self, frame: Frame, now: float) -> list[int]:
        """Accept a DATA frame; returns the seqs to NACK."""
        index = self._unwrap(frame.seq)
        if self.ended or index < self.next_index or index in self._received:
            if index in self._gap_indices:
                self.late += 1
            else:
                self.duplicates += 1
            return []
        if index > self.terminator_index:
            raise BadPayload(f"frame {index} beyond the announced end of stream")
        if index == self.terminator_index:
            if frame.payload:
                raise BadPayload("end-of-stream frame carries a payload")
            samples = np.empty((self.descriptor.n_channels, 0), dtype=np.int16)
        else:
            start, stop = self.descriptor.frame_range(index)
            samples = decode_samples(frame.payload, self.descriptor.n_channels, stop - start,
                                     self.descriptor.compressed)
        nacks = self._register_up_to(index, now)
        if self._missing.pop(index, None) is not None:
            self.healed += 1
        self._received[index] = samples
        self.highest_seen = max(self.highest_seen, index)
        self._drain(now)
        return nacks

    def on_heartbeat(self, frame: Frame, now: float) -> list[int]:
        if self.ended:
            return []
        upto = min(self._unwrap(frame.seq), self.terminator_index + 1)
        return self._register_up_to(upto, now) if upto > self.highest_seen + 1 else []

    def expire(self, now: float):
        """Finalize gaps whose deadline has passed."""
        self._drain(now)

    def finish(self, now: float):
        """Close the stream: everything still outstanding becomes a gap."""
        self._register_up_to(self.terminator_index + 1, now)
        for m in self._missing.values():
            m.deadline_ms = min(m.deadline_ms, now)
        self._drain(now, force=True)

    @property
    def next_deadline(self) -> Optional[float]:
        if not self._missing:
            return None
        return min(m.deadline_ms for m in self._missing.values())

    def pop_events(self) -> list:
        out, self._events = self._events, []
        return out

    def _drain(self, now: float, force: bool = False):
        while not self.ended:
            k = self.next_index
            if k in self._received:
                samples = self._received.pop(k)
                if k == self.terminator_index:
                    self.ended = True
                    self._events.append(EndOfStream(self.descriptor.total_samples))
                else:
                    self._events.append(Chunk(k, k * self.descriptor.samples_per_frame, samples))
                self.next_index += 1
            elif k in self._missing and (force or self._missing[k].deadline_ms <= now):
                m = self._missing.pop(k)
                if k == self.terminator_index:
                    self.ended = True
                    self._events.append(EndOfStream(self.descriptor.total_samples))
                else:
                    start, stop = self.descriptor.frame_range(k)
                    gap = GapReport(k, start, stop, m.detected_ms, m.deadline_ms)
                    self.gaps.append(gap)
                    self._gap_indices.add(k)
                    self._events.append(gap)
                self.next_index += 1
            else:
                return


def reassemble(descriptor: StreamDescriptor, arrivals: Iterable[tuple[float, bytes]],
               deadline_ms: float = GAP_DEADLINE_MS, end_ms: Optional[float] = None):
    """Batch reassembly of ``(arrival_ms, frame bytes)`` pairs.

    Returns ``(samples, gaps, nacks)``: the delivered samples as an
    (n_channels, total) int16 array with gap positions zeroed, the gap
    reports, and the ``(time, seq)`` NACKs that would have been sent.
    """
    r = Reassembler(descriptor, deadline_ms)
    nacks = []
    last = 0.0
    for t, raw in sorted(arrivals, key=lambda a: a[0]):
        r.expire(t)
        frame = decode_frame(raw)
        if frame.msg_type is MsgType.DATA:
            nacks.extend((t, s) for s in r.on_data(frame, t))
        elif frame.msg_type is MsgType.HEARTBEAT:
            nacks.extend((t, s) for s in r.on_heartbeat(frame, t))
        last = t
    r.finish(end_ms if end_ms is not None else last + deadline_ms)
    out = np.zeros((descriptor.n_channels, descriptor.total_samples), dtype=np.int16)
    for ev in r.pop_events():
        if isinstance(ev, Chunk):
            out[:, ev.start: ev.start + ev.samples.shape[1]] = ev.samples
    return out, list(r.gaps), nacks


# --------------------------------------------------------------------------- lossy link


@dataclass(frozen=True)
class LinkConfig:
    loss_probability: float = 0.0
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValueError("loss_probability must lie in [0, 1)")
        if self.delay_ms < 0 or self.jitter_ms < 0:
            raise ValueError("delay_ms and jitter_ms must be non-negative")


class LossyLink:
    """Seeded drop/delay schedule. Two uniforms are drawn per frame, in send order."""

    def __init__(self, config: LinkConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self.sent = 0
        self.dropped = 0

    def transmit(self, send_ms: float) -> Optional[float]:
        """Arrival time for a frame sent at ``send_ms``, or None if it is lost."""
        u_loss, u_jitter = self._rng.random(2)
        self.sent += 1
        if u_loss < self.config.loss_probability:
            self.dropped += 1
            return None
        jitter = (2.0 * u_jitter - 1.0) * self.config.jitter_ms
        return send_ms + max(0.0, self.config.delay_ms + jitter)


@dataclass(frozen=True)
class Delivery:
    index: int
    payload: bytes
    send_ms: float
    arrival_ms: float


def lossy_link(frames: Iterable[tuple[float, bytes]], config: LinkConfig) -> list[Delivery]:
    """Deliver ``(send_ms, bytes)`` items; survivors sorted by arrival, ties by send order."""
    link = LossyLink(config)
    out = []
    prev = -np.inf
    for i, (t, payload) in enumerate(frames):
        if t < prev:
            raise ValueError("send times must be nondecreasing")
        prev = t
        arrival = link.transmit(t)
        if arrival is not None:
            out.append(Delivery(i, payload, t, arrival))
    out.sort(key=lambda d: (d.arrival_ms, d.index))
    return out


class SimLink:
    """One direction of a radio link inside a simpy environment (times in ms).

    Like the serial byte stream it stands in for, the link preserves order by
    default: jitter can delay a frame but never let a later one overtake it.
    """

    def __init__(self, env: simpy.Environment, config: LinkConfig, name: str = "",
                 in_order: bool = True):
        self.env = env
        self.name = name
        self.in_order = in_order
        self._last_arrival = -np.inf
        self.inbox = simpy.Store(env)
        self._link = LossyLink(config)
        self.closed = False
        # send, arrival (None if lost), msg type, seq; -1 fields for unparseable bytes
        self.trace: list[tuple[float, Optional[float], int, int]] = []

    @property
    def sent(self) -> int:
        return self._link.sent

    @property
    def dropped(self) -> int:
        return self._link.dropped

    def send(self, data: bytes) -> bool:
        if self.closed:
            raise LinkClosed(f"link {self.name or '?'} is closed")
        now = self.env.now
        arrival = self._link.transmit(now)
        kind, seq = (data[4], data[5] | data[6] << 8) if len(data) >= HEADER.size else (-1, -1)
        self.trace.append((now, arrival, kind, seq))
        if arrival is None:
            return False
        if self.in_order:
            arrival = max(arrival, self._last_arrival)
            self._last_arrival = arrival
            self.trace[-1] = (now, arrival, kind, seq)
        ev = self.env.timeout(arrival - now)
        ev.callbacks.append(lambda _ev, d=data: self.inbox.put((self.env.now, d)))
        return True

    def close(self):
        self.closed = True


# --------------------------------------------------------------------------- handshake


@dataclass
class SyncResult:
    token: int
    epoch_ms: int
    descriptor: StreamDescriptor
    attempts: int
    established_ms: float


def initiate_sync(env: simpy.Environment, downlink: SimLink, ack: "simpy.Store", device_id: int,
                  token: int, epoch_ms: int, retries: int = SYNC_RETRIES,
                  interval_ms: float = SYNC_INTERVAL_MS):
    """Communicator side of the handshake, as a simpy process.

    ``ack`` receives decoded SYNC_ACK frames routed by the caller. The process
    value is a ``SyncResult``; it raises SyncTimeout or TokenMismatch.
    """
    for attempt in range(1, retries + 1):
        downlink.send(sync_frame(device_id, token, epoch_ms, attempt - 1))
        deadline = env.timeout(interval_ms)
        got = ack.get()
        fired = yield got | deadline
        if got not in fired:
            got.cancel()
            continue
        echoed, descriptor = StreamDescriptor.unpack(got.value.payload)
        if echoed != token:
            raise TokenMismatch(f"device {device_id} echoed {echoed:#x}, expected {token:#x}")
        return SyncResult(token, epoch_ms, descriptor, attempt, env.now)
    raise SyncTimeout(f"no SYNC_ACK from device {device_id} after {retries} attempts")


def answer_sync(env: simpy.Environment, session: DeviceSession, downlink: SimLink, uplink: SimLink):
    """Device side: acknowledge every SYNC arriving on ``downlink``, repeats included."""
    while session.state is not SessionState.Closed:
        _, raw = yield downlink.inbox.get()
        try:
            frame = decode_frame(raw)
        except ProtocolError:
            continue
        if frame.msg_type is MsgType.SYNC:
            uplink.send(session.accept_sync(frame))


def sync_handshake(session: DeviceSession, downlink: LinkConfig, uplink: LinkConfig,
                   token: int = 0x1C4D0001, epoch_ms: int = 0) -> SyncResult:
    """Run the SYNC exchange alone over two seeded links and report the outcome."""
    env = simpy.Environment()
    down, up = SimLink(env, downlink, "down"), SimLink(env, uplink, "up")
    acks = simpy.Store(env)

    def route():
        while True:
            _, raw = yield up.inbox.get()
            try:
                frame = decode_frame(raw)
            except ProtocolError:
                continue
            if frame.msg_type is MsgType.SYNC_ACK:
                acks.put(frame)

    env.process(answer_sync(env, session, down, up))
    env.process(route())
    proc = env.process(initiate_sync(env, down, acks, session.device_id, token, epoch_ms))
    env.run(until=proc)
    return proc.value
