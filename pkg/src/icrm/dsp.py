"""Signal conditioning between raw records and classifier inputs.

Decimation, fixed-length windowing, per-window z-scoring and the lossless
delta/zig-zag/varint codec the sensors apply before transmission.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .labels import ClassLabel

DEFAULT_FACTOR = 8
DEFAULT_WINDOW = 106
FIR_TAPS = 31
FLAT_STD = 1e-12

CODEC_DELTA_VARINT = 0x01
BLOCK_HEADER = struct.Struct("<BhI")  # codec id, first sample, original length


class EmptySignal(ValueError):
    pass


class ZeroFactor(ValueError):
    pass


class CodecError(ValueError):
    """Base class for malformed compressed blocks."""


class TruncatedStream(CodecError):
    pass


class OverlongVarint(CodecError):
    pass


class SampleOverflow(CodecError):
    """Decoded deltas leave the 16-bit range."""


class UnknownCodec(CodecError):
    pass


# --------------------------------------------------------------------------- decimation


def lowpass_taps(factor: int, numtaps: int = FIR_TAPS) -> np.ndarray:
    """Hamming-windowed sinc with cutoff at the post-decimation Nyquist, unit DC gain."""
    cutoff = 0.5 / factor  # cycles per input sample
    n = np.arange(numtaps) - (numtaps - 1) / 2
    h = 2 * cutoff * np.sinc(2 * cutoff * n) * np.hamming(numtaps)
    return h / h.sum()


def decimate(signal, factor: int = DEFAULT_FACTOR, anti_alias: bool = True) -> np.ndarray:
    """Keep every ``factor``-th sample, optionally after a linear-phase FIR low-pass.

    The filter is applied zero-delay (centred taps, odd-reflection padding at the
    edges) so decimated sample ``k`` stays aligned with input sample ``k*factor``.
    """
    x = np.asarray(signal, dtype=np.float64)
    if factor < 1:
        raise ZeroFactor(f"decimation factor must be >= 1, got {factor}")
    if x.size == 0:
        raise EmptySignal("cannot decimate an empty signal")
    if anti_alias:
        taps = lowpass_taps(factor)
        half = (len(taps) - 1) // 2
        padded = np.pad(x, half, mode="reflect", reflect_type="odd")
        x = np.convolve(padded, taps, mode="valid")
    n_out = x.size // factor
    return x[: n_out * factor : factor].copy()


# --------------------------------------------------------------------------- segmentation


@dataclass(frozen=True)
class Segment:
    samples: np.ndarray = field(repr=False)
    record_id: str = ""
    channel: int = 0
    start: int = 0
    label: Optional[ClassLabel] = None

    def __len__(self):
        return len(self.samples)


def window_starts(length: int, window_len: int, hop: int) -> range:
    if window_len < 1 or hop < 1:
        raise ValueError("window_len and hop must be >= 1")
    if length < window_len:
        return range(0)
    return range(0, length - window_len + 1, hop)


def window_matrix(signal, window_len: int = DEFAULT_WINDOW, hop: int | None = None) -> np.ndarray:
    """All complete windows stacked as rows; trailing partial window dropped."""
    x = np.asarray(signal, dtype=np.float64)
    hop = window_len if hop is None else hop
    starts = window_starts(x.size, window_len, hop)
    if len(starts) == 0:
        return np.empty((0, window_len))
    view = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop]
    return np.ascontiguousarray(view[: len(starts)])


def segment_signal(signal, window_len: int = DEFAULT_WINDOW, hop: int | None = None, *,
                   record_id: str = "", channel: int = 0,
                   label: ClassLabel | None = None) -> list[Segment]:
    hop = window_len if hop is None else hop
    rows = window_matrix(signal, window_len, hop)
    return [
        Segment(row, record_id, channel, k * hop, label)
        for k, row in enumerate(rows)
    ]


def normalize(samples) -> np.ndarray:
    """Z-score to zero mean, unit population std; flat input maps to zeros.

    Accepts one window or a 2-D stack of windows (normalized row by row).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise EmptySignal("cannot normalize an empty segment")
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    std = np.sqrt(np.mean(centred * centred, axis=-1, keepdims=True))
    flat = std < FLAT_STD
    out = centred / np.where(flat, 1.0, std)
    return np.where(flat, 0.0, out)


# --------------------------------------------------------------------------- codec


@dataclass(frozen=True)
class CompressedBlock:
    first_sample: int
    deltas: bytes
    original_len: int
    codec_id: int = CODEC_DELTA_VARINT

    def to_bytes(self) -> bytes:
        return BLOCK_HEADER.pack(self.codec_id, self.first_sample, self.original_len) + self.deltas

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedBlock":
        samples, end = decode_block(data, 0)
        if end != len(data):
            raise CodecError(f"{len(data) - end} trailing bytes after block")
        return cls(int(samples[0]), bytes(data[BLOCK_HEADER.size:]), len(samples))

    def __len__(self):
        return BLOCK_HEADER.size + len(self.deltas)


def _as_int16(samples) -> np.ndarray:
    arr = np.asarray(samples)
    if arr.size == 0:
        raise EmptySignal("cannot compress an empty vector")
    if arr.dtype != np.int16:
        wide = arr.astype(np.int64)
        if not np.array_equal(wide, arr) or wide.min() < -32768 or wide.max() > 32767:
            raise ValueError("samples must be 16-bit integers")
        arr = wide.astype(np.int16)
    return np.ascontiguousarray(arr.ravel())


def compress(samples) -> CompressedBlock:
    values = _as_int16(samples)
    return CompressedBlock(int(values[0]), kernels.encode_deltas(values), int(values.size))


def _raise_for(status: int):
    if status == kernels.TRUNCATED:
        raise TruncatedStream("delta stream ends early")
    if status == kernels.OVERLONG:
        raise OverlongVarint("varint longer than 3 bytes")
    if status == kernels.OUT_OF_RANGE:
        raise SampleOverflow("reconstructed sample outside 16-bit range")


def decompress(block: CompressedBlock) -> np.ndarray:
    if block.codec_id != CODEC_DELTA_VARINT:
        raise UnknownCodec(f"codec id {block.codec_id:#x}")
    if block.original_len < 1:
        raise CodecError("block declares zero samples")
    if block.original_len - 1 > len(block.deltas):
        raise TruncatedStream("fewer delta bytes than declared samples")
    samples, end, status = kernels.decode_deltas(block.deltas, 0, block.first_sample,
                                                 block.original_len)
    _raise_for(status)
    if end != len(block.deltas):
        raise CodecError(f"{len(block.deltas) - end} trailing bytes in delta stream")
    return samples


def decode_block(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one serialized block starting at ``offset``; returns (samples, end offset)."""
    if len(buf) - offset < BLOCK_HEADER.size:
        raise TruncatedStream("block header truncated")
    codec_id, first, count = BLOCK_HEADER.unpack_from(buf, offset)
    if codec_id != CODEC_DELTA_VARINT:
        raise UnknownCodec(f"codec id {codec_id:#x}")
    if count < 1:
        raise CodecError("block declares zero samples")
    if count - 1 > len(buf) - offset - BLOCK_HEADER.size:
        raise TruncatedStream("fewer delta bytes than declared samples")
    samples, end, status = kernels.decode_deltas(buf, offset + BLOCK_HEADER.size, first, count)
    _raise_for(status)
    return samples, end


def compression_ratio(samples) -> float:
    """Serialized compressed size over raw 16-bit size."""
    values = _as_int16(samples)
    return len(compress(values)) / (2.0 * values.size)
