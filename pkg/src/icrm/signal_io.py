"""Cardiac signal records: a WFDB subset reader/writer and a CSV interchange format.

Only WFDB format 16 (16-bit little-endian two's complement, frame-interleaved,
one ``.dat`` file per record) is handled; anything else is rejected rather than
misread.
"""
from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_GAIN = 200.0
SUPPORTED_FORMAT = 16


class SignalIOError(Exception):
    """Base class for record parsing and writing failures."""


class MalformedHeader(SignalIOError):
    pass


class UnsupportedFormat(SignalIOError):
    pass


class InvalidCounts(SignalIOError):
    pass


class LengthMismatch(SignalIOError):
    pass


class IOFailure(SignalIOError):
    pass


class RaggedRows(SignalIOError):
    pass


class NonMonotonicTime(SignalIOError):
    pass


class MalformedCSV(SignalIOError):
    pass


class SampleRangeError(SignalIOError):
    """Physical value does not fit a 16-bit ADC code under the channel's gain."""


class ChannelKind(enum.Enum):
    SurfaceECG = "ecg"
    IntracardiacEGM = "egm"

    @classmethod
    def parse(cls, value: "ChannelKind | str") -> "ChannelKind":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        for kind in cls:
            if text in (kind.value, kind.name.lower()):
                return kind
        raise ValueError(f"unknown channel kind {value!r}")


@dataclass(frozen=True)
class SignalDescriptor:
    gain: float = DEFAULT_GAIN
    baseline: int = 0
    units: str = "mV"
    description: str = ""
    filename: str = ""
    adc_resolution: int = 16
    adc_zero: int = 0
    initial_value: int = 0
    checksum: int = 0
    block_size: int = 0


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    num_signals: int
    sampling_rate: float
    num_samples: int
    signals: tuple[SignalDescriptor, ...] = ()

    def __post_init__(self):
        if self.num_signals < 1:
            raise InvalidCounts(f"num_signals must be >= 1, got {self.num_signals}")
        if not (math.isfinite(self.sampling_rate) and self.sampling_rate > 0):
            raise InvalidCounts(f"sampling_rate must be positive, got {self.sampling_rate}")
        if self.num_samples < 0:
            raise InvalidCounts(f"num_samples must be >= 0, got {self.num_samples}")
        if len(self.signals) != self.num_signals:
            raise MalformedHeader(
                f"header declares {self.num_signals} signals but describes {len(self.signals)}"
            )
        for sig in self.signals:
            if sig.gain == 0 or not math.isfinite(sig.gain):
                raise MalformedHeader(f"gain must be finite and nonzero, got {sig.gain}")


@dataclass(frozen=True)
class SignalRecord:
    """Physical samples in channel-major layout, shape ``(num_signals, num_samples)``."""

    header: RecordHeader
    channels: np.ndarray = field(repr=False)

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 2 or ch.shape != (self.header.num_signals, self.header.num_samples):
            raise LengthMismatch(
                f"channel matrix shape {ch.shape} does not match header "
                f"({self.header.num_signals}, {self.header.num_samples})"
            )
        if not np.all(np.isfinite(ch)):
            raise SignalIOError("record contains non-finite samples")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)

    @property
    def name(self) -> str:
        return self.header.record_name

    @property
    def sampling_rate(self) -> float:
        return self.header.sampling_rate

    def channel(self, index: int) -> np.ndarray:
        return self.channels[index]

    def __eq__(self, other):
        if not isinstance(other, SignalRecord):
            return NotImplemented
        return self.header == other.header and np.array_equal(self.channels, other.channels)

    __hash__ = None


def make_record(name, channels, sampling_rate, descriptions=None, gain=DEFAULT_GAIN,
                units="mV") -> SignalRecord:
    """Build a record from a physical-unit matrix with uniform gain and zero baseline."""
    data = np.atleast_2d(np.asarray(channels, dtype=np.float64))
    n_sig, n_samp = data.shape
    if descriptions is None:
        descriptions = [f"signal {i}" for i in range(n_sig)]
    signals = tuple(
        SignalDescriptor(gain=float(gain), baseline=0, units=units, description=d,
                         filename=f"{name}.dat")
        for d in descriptions
    )
    header = RecordHeader(name, n_sig, float(sampling_rate), n_samp, signals)
    return SignalRecord(header, data)


# --------------------------------------------------------------------------- WFDB


def _parse_number(token: str, what: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {token!r}") from None
    if not math.isfinite(value):
        raise MalformedHeader(f"non-finite {what}: {token!r}")
    return value


def _parse_int(token: str, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise MalformedHeader(f"non-integer {what}: {token!r}") from None


def _parse_gain(token: str) -> tuple[float, int | None, str]:
    # gain[(baseline)][/units]
    units = "mV"
    if "/" in token:
        token, units = token.split("/", 1)
        units = units or "mV"
    baseline = None
    if "(" in token:
        if not token.endswith(")"):
            raise MalformedHeader(f"malformed gain field {token!r}")
        token, base = token[:-1].split("(", 1)
        baseline = _parse_int(base, "baseline")
    gain = _parse_number(token, "gain") if token else DEFAULT_GAIN
    if gain == 0:
        raise MalformedHeader("gain of 0 (uncalibrated) is not supported")
    return gain, baseline, units


def _parse_signal_line(line: str) -> SignalDescriptor:
    tokens = line.split()
    if len(tokens) < 2:
        raise MalformedHeader(f"signal line needs at least filename and format: {line!r}")
    filename, fmt = tokens[0], tokens[1]
    if not (fmt.isascii() and fmt.isdigit()):
        raise UnsupportedFormat(f"format specification {fmt!r} is not supported")
    if int(fmt) != SUPPORTED_FORMAT:
        raise UnsupportedFormat(f"format {fmt} is not supported (only 16)")
    gain, baseline, units = DEFAULT_GAIN, None, "mV"
    if len(tokens) > 2:
        gain, baseline, units = _parse_gain(tokens[2])
    ints = [0, 0, 0, 0, 0]
    names = ("adc resolution", "adc zero", "initial value", "checksum", "block size")
    defaults = [16, 0, 0, 0, 0]
    for j in range(5):
        pos = 3 + j
        ints[j] = _parse_int(tokens[pos], names[j]) if len(tokens) > pos else defaults[j]
    description = " ".join(tokens[8:])
    if baseline is None:
        baseline = ints[1]
    return SignalDescriptor(
        gain=gain, baseline=baseline, units=units, description=description,
        filename=filename, adc_resolution=ints[0], adc_zero=ints[1],
        initial_value=ints[2], checksum=ints[3], block_size=ints[4],
    )


def parse_wfdb_header(text: str | bytes) -> RecordHeader:
    """Parse the contents of a ``.hea`` file."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("ascii")
        except UnicodeDecodeError:
            raise MalformedHeader("header is not ASCII text") from None
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise MalformedHeader("empty header")
    record_line = lines[0].split()
    if len(record_line) < 4:
        raise MalformedHeader(
            "record line must be 'name num_signals sampling_rate num_samples'"
        )
    name, nsig_tok, fs_tok, nsamp_tok = record_line[:4]
    if "/" in name:
        raise UnsupportedFormat("multi-segment records are not supported")
    num_signals = _parse_int(nsig_tok, "signal count")
    fs = _parse_number(fs_tok.split("/", 1)[0].split("(", 1)[0], "sampling rate")
    num_samples = _parse_int(nsamp_tok, "sample count")
    if num_signals < 1:
        raise InvalidCounts(f"num_signals must be >= 1, got {num_signals}")
    if fs <= 0:
        raise InvalidCounts(f"sampling_rate must be positive, got {fs}")
    if num_samples < 0:
        raise InvalidCounts(f"num_samples must be >= 0, got {num_samples}")
    signal_lines = lines[1:]
    if len(signal_lines) != num_signals:
        raise MalformedHeader(
            f"header declares {num_signals} signals but has {len(signal_lines)} signal lines"
        )
    signals = tuple(_parse_signal_line(ln) for ln in signal_lines)
    if len({s.filename for s in signals}) != 1:
        raise UnsupportedFormat("signals spread over several data files are not supported")
    return RecordHeader(name, num_signals, fs, num_samples, signals)


def _format_float(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def format_wfdb_header(header: RecordHeader) -> str:
    lines = [
        f"{header.record_name} {header.num_signals} "
        f"{_format_float(header.sampling_rate)} {header.num_samples}"
    ]
    for sig in header.signals:
        fields = [
            sig.filename or f"{header.record_name}.dat",
            str(SUPPORTED_FORMAT),
            f"{_format_float(sig.gain)}({sig.baseline})/{sig.units}",
            str(sig.adc_resolution),
            str(sig.adc_zero),
            str(sig.initial_value),
            str(sig.checksum),
            str(sig.block_size),
        ]
        if sig.description:
            fields.append(sig.description)
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def read_wfdb_samples(data: bytes, header: RecordHeader) -> SignalRecord:
    """Decode a format-16 ``.dat`` payload into physical units."""
    expected = 2 * header.num_signals * header.num_samples
    if len(data) != expected:
        raise LengthMismatch(f"expected {expected} bytes of samples, got {len(data)}")
    raw = np.frombuffer(bytes(data), dtype="<i2").reshape(header.num_samples, header.num_signals)
    gains = np.array([s.gain for s in header.signals], dtype=np.float64)
    baselines = np.array([s.baseline for s in header.signals], dtype=np.float64)
    physical = (raw.T.astype(np.float64) - baselines[:, None]) / gains[:, None]
    return SignalRecord(header, physical)


def to_digital(record: SignalRecord) -> np.ndarray:
    """Invert the gain/baseline conversion: int16 ADC codes, channel-major."""
    gains = np.array([s.gain for s in record.header.signals], dtype=np.float64)
    baselines = np.array([s.baseline for s in record.header.signals], dtype=np.float64)
    raw = np.rint(record.channels * gains[:, None] + baselines[:, None])
    if raw.size and (raw.min() < -32768 or raw.max() > 32767):
        raise SampleRangeError("physical values exceed the 16-bit range at this gain")
    return raw.astype(np.int16)


def encode_wfdb_samples(record: SignalRecord) -> bytes:
    return np.ascontiguousarray(to_digital(record).T).astype("<i2").tobytes()


def _stamped_header(record: SignalRecord, name: str, raw: np.ndarray) -> RecordHeader:
    signals = []
    for i, sig in enumerate(record.header.signals):
        ch = raw[i].astype(np.int64)
        init = int(ch[0]) if ch.size else 0
        checksum = int(ch.sum()) & 0xFFFF
        if checksum >= 0x8000:
            checksum -= 0x10000
        signals.append(replace(sig, filename=f"{name}.dat", initial_value=init, checksum=checksum))
    return replace(record.header, record_name=name, signals=tuple(signals))


def _record_base(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".hea", ".dat") else p


def read_wfdb(path: str | os.PathLike) -> SignalRecord:
    """Read ``<base>.hea`` and the data file it names; ``path`` may include a suffix."""
    base = _record_base(path)
    hea = base.with_name(base.name + ".hea")
    try:
        header = parse_wfdb_header(hea.read_bytes())
        data = (hea.parent / header.signals[0].filename).read_bytes()
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    return read_wfdb_samples(data, header)


def write_wfdb(record: SignalRecord, path: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<base>.hea`` + ``<base>.dat``; the record is renamed after the base."""
    base = _record_base(path)
    raw = to_digital(record)
    header = _stamped_header(record, base.name, raw)
    hea = base.with_name(base.name + ".hea")
    dat = base.with_name(base.name + ".dat")
    try:
        dat.write_bytes(np.ascontiguousarray(raw.T).astype("<i2").tobytes())
        hea.write_text(format_wfdb_header(header), encoding="ascii", newline="\n")
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    return hea, dat


# --------------------------------------------------------------------------- CSV


def write_csv_record(record: SignalRecord) -> str:
    """Serialize as ``t,ch0,ch1,...`` rows followed by ``#`` metadata lines.

    Floats are written with ``repr`` (shortest round-tripping form), so reading
    the text back reproduces every value exactly.
    """
    h = record.header
    fs = h.sampling_rate
    out = ["t," + ",".join(f"ch{i}" for i in range(h.num_signals))]
    cols = record.channels.T.tolist()
    for i, row in enumerate(cols):
        out.append(repr(i / fs) + "," + ",".join(repr(v) for v in row))
    out.append(f"# record={h.record_name}")
    out.append(f"# sampling_rate={_format_float(fs)}")
    for i, sig in enumerate(h.signals):
        out.append(
            f"# signal={i} gain={_format_float(sig.gain)} baseline={sig.baseline} "
            f"units={sig.units} adc_resolution={sig.adc_resolution} adc_zero={sig.adc_zero} "
            f"block_size={sig.block_size} description={sig.description}"
        )
    return "\n".join(out) + "\n"


def _parse_meta(lines: list[str]) -> tuple[dict[str, str], dict[int, dict[str, str]]]:
    record_meta: dict[str, str] = {}
    signal_meta: dict[int, dict[str, str]] = {}
    for line in lines:
        body = line[1:].strip()
        if body.startswith("signal="):
            # description is free text and always last
            head, _, desc = body.partition(" description=")
            entry = dict(kv.split("=", 1) for kv in head.split() if "=" in kv)
            try:
                idx = int(entry.pop("signal"))
            except ValueError:
                raise MalformedCSV(f"bad signal metadata line {line!r}") from None
            entry["description"] = desc
            signal_meta[idx] = entry
        elif "=" in body:
            key, value = body.split("=", 1)
            record_meta[key.strip()] = value.strip()
    return record_meta, signal_meta


def read_csv_record(text: str, sampling_rate: float | None = None,
                    name: str | None = None) -> SignalRecord:
    """Parse the CSV dialect produced by :func:`write_csv_record`.

    The sampling rate comes from ``sampling_rate`` if given, else from the
    ``# sampling_rate=`` metadata line, else from the ``t`` column spacing.
    """
    lines = [ln for ln in text.split("\n") if ln.strip()]
    meta_lines = [ln for ln in lines if ln.startswith("#")]
    rows = [ln for ln in lines if not ln.startswith("#")]
    if not rows:
        raise MalformedCSV("no header row")
    columns = rows[0].split(",")
    if len(columns) < 2 or columns[0].strip() != "t":
        raise MalformedCSV("header row must be 't,ch0,ch1,...'")
    n_cols = len(columns)
    body = rows[1:]
    if not body:
        raise MalformedCSV("no sample rows")
    values = np.empty((len(body), n_cols), dtype=np.float64)
    for r, line in enumerate(body):
        cells = line.split(",")
        if len(cells) != n_cols:
            raise RaggedRows(f"row {r + 1} has {len(cells)} fields, expected {n_cols}")
        try:
            values[r] = [float(c) for c in cells]
        except ValueError:
            raise MalformedCSV(f"non-numeric value in row {r + 1}") from None
    if not np.all(np.isfinite(values)):
        raise MalformedCSV("non-finite value in CSV")
    t = values[:, 0]
    if np.any(np.diff(t) <= 0):
        raise NonMonotonicTime("t column must be strictly increasing")

    record_meta, signal_meta = _parse_meta(meta_lines)
    fs = sampling_rate
    if fs is None and "sampling_rate" in record_meta:
        try:
            fs = float(record_meta["sampling_rate"])
        except ValueError:
            raise MalformedCSV("bad sampling_rate metadata") from None
    if fs is None:
        if len(t) < 2:
            raise MalformedCSV("cannot infer the sampling rate from a single row")
        fs = round((len(t) - 1) / (t[-1] - t[0]), 6)
    rec_name = name or record_meta.get("record", "record")
    n_sig = n_cols - 1
    signals = []
    for i in range(n_sig):
        m = signal_meta.get(i, {})
        try:
            signals.append(SignalDescriptor(
                gain=float(m.get("gain", DEFAULT_GAIN)),
                baseline=int(m.get("baseline", 0)),
                units=m.get("units", "mV"),
                description=m.get("description", ""),
                filename=f"{rec_name}.dat",
                adc_resolution=int(m.get("adc_resolution", 16)),
                adc_zero=int(m.get("adc_zero", 0)),
                block_size=int(m.get("block_size", 0)),
            ))
        except ValueError:
            raise MalformedCSV(f"bad metadata for signal {i}") from None
    header = RecordHeader(rec_name, n_sig, fs, len(body), tuple(signals))
    return SignalRecord(header, values[:, 1:].T.copy())


def load_record(path: str | os.PathLike) -> SignalRecord:
    """Load a ``.csv`` file or a WFDB record (``.hea``/``.dat``/base name)."""
    p = Path(path)
    if p.suffix == ".csv":
        try:
            text = p.read_text(encoding="ascii")
        except (OSError, UnicodeDecodeError) as exc:
            raise IOFailure(str(exc)) from exc
        return read_csv_record(text, name=p.stem)
    return read_wfdb(p)


def save_record(record: SignalRecord, path: str | os.PathLike) -> list[Path]:
    p = Path(path)
    if p.suffix == ".csv":
        try:
            p.write_text(write_csv_record(record), encoding="ascii", newline="\n")
        except OSError as exc:
            raise IOFailure(str(exc)) from exc
        return [p]
    return list(write_wfdb(record, p))


# --------------------------------------------------------------------------- channel kinds


def infer_kind(description: str) -> ChannelKind:
    return ChannelKind.SurfaceECG if "ECG" in description.upper() else ChannelKind.IntracardiacEGM


def channel_kinds(header: RecordHeader,
                  overrides: Mapping[int | str, ChannelKind | str] | None = None
                  ) -> list[ChannelKind]:
    """Kind of every channel; ``overrides`` keys are channel indices or exact descriptions."""
    overrides = overrides or {}
    kinds = []
    for i, sig in enumerate(header.signals):
        if i in overrides:
            kinds.append(ChannelKind.parse(overrides[i]))
        elif sig.description in overrides:
            kinds.append(ChannelKind.parse(overrides[sig.description]))
        else:
            kinds.append(infer_kind(sig.description))
    return kinds


def channels_of_kind(header: RecordHeader, kind: ChannelKind,
                     overrides: Mapping[int | str, ChannelKind | str] | None = None
                     ) -> list[int]:
    return [i for i, k in enumerate(channel_kinds(header, overrides)) if k is kind]


__all__: Sequence[str] = [
    "ChannelKind", "SignalDescriptor", "RecordHeader", "SignalRecord", "SignalIOError",
    "MalformedHeader", "UnsupportedFormat", "InvalidCounts", "LengthMismatch", "IOFailure",
    "RaggedRows", "NonMonotonicTime", "MalformedCSV", "SampleRangeError",
    "parse_wfdb_header", "format_wfdb_header", "read_wfdb_samples", "encode_wfdb_samples",
    "to_digital", "read_wfdb", "write_wfdb", "read_csv_record", "write_csv_record",
    "load_record", "save_record", "make_record", "channel_kinds", "channels_of_kind",
    "infer_kind",
]
