import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from icrm import dsp


# --------------------------------------------------------------------------- decimate


def test_decimate_every_other_sample():
    np.testing.assert_array_equal(dsp.decimate([1, 2, 3, 4], 2, anti_alias=False), [1, 3])


def test_decimate_output_length_is_floor():
    assert dsp.decimate(np.arange(17.0), 8, anti_alias=False).tolist() == [0.0, 8.0]
    assert len(dsp.decimate(np.arange(17.0), 8, anti_alias=True)) == 2


@given(hnp.arrays(np.float64, st.integers(1, 60), elements=st.floats(-1e3, 1e3)))
def test_decimate_factor_one_identity(x):
    np.testing.assert_array_equal(dsp.decimate(x, 1, anti_alias=False), x)


def test_decimate_factor_one_filtered_is_identity():
    # cutoff at the original Nyquist collapses the windowed sinc to a unit impulse
    x = np.random.default_rng(0).normal(size=100)
    np.testing.assert_allclose(dsp.decimate(x, 1, anti_alias=True), x, atol=1e-12)


def test_decimate_sine_against_analytic():
    fs, f, factor = 1000.0, 5.0, 8
    x = np.sin(2 * np.pi * f * np.arange(4000) / fs)
    y = dsp.decimate(x, factor, anti_alias=True)
    expected = np.sin(2 * np.pi * f * np.arange(len(y)) * factor / fs)
    assert np.max(np.abs(y - expected)) < 0.01  # amplitude 1


def test_decimate_attenuates_above_new_nyquist():
    fs, factor = 1000.0, 8
    x = np.sin(2 * np.pi * 200.0 * np.arange(4000) / fs)  # 200 Hz > 62.5 Hz
    y = dsp.decimate(x, factor, anti_alias=True)
    assert np.max(np.abs(y[10:-10])) < 0.05


def test_fir_is_linear_phase_with_31_taps():
    h = dsp.lowpass_taps(8)
    assert len(h) == 31
    np.testing.assert_allclose(h, h[::-1])
    assert abs(h.sum() - 1) < 1e-12


def test_decimate_errors():
    with pytest.raises(dsp.ZeroFactor):
        dsp.decimate([1.0], 0)
    with pytest.raises(dsp.EmptySignal):
        dsp.decimate([], 2)


@given(hnp.arrays(np.float64, st.integers(1, 200), elements=st.floats(-1e3, 1e3)),
       st.integers(1, 6), st.integers(1, 6))
def test_decimate_composes(x, f, g):
    once = dsp.decimate(x, f * g, anti_alias=False)
    twice_len = len(x) // f
    if twice_len == 0:
        assert len(once) == 0
        return
    twice = dsp.decimate(dsp.decimate(x, f, anti_alias=False), g, anti_alias=False)
    np.testing.assert_array_equal(once, twice)


# --------------------------------------------------------------------------- segmentation


def _enumerated_count(length, window, hop):
    return sum(1 for s in range(length) if s % hop == 0 and s + window <= length)


@pytest.mark.parametrize("length, window, hop", [(212, 106, 106), (105, 106, 106),
                                                 (1000, 106, 53), (106, 106, 1)])
def test_segment_counts(length, window, hop):
    segs = dsp.segment_signal(np.arange(float(length)), window, hop)
    assert len(segs) == _enumerated_count(length, window, hop)


def test_segment_counts_frozen():
    assert len(dsp.segment_signal(np.zeros(212), 106, 106)) == 2
    assert len(dsp.segment_signal(np.zeros(105), 106)) == 0
    assert len(dsp.segment_signal(np.zeros(1000), 106, 53)) == 17


def test_segment_metadata():
    segs = dsp.segment_signal(np.arange(300.0), 100, 50, record_id="r1", channel=2)
    assert [s.start for s in segs] == [0, 50, 100, 150, 200]
    assert all(s.record_id == "r1" and s.channel == 2 and len(s) == 100 for s in segs)
    np.testing.assert_array_equal(segs[1].samples, np.arange(50.0, 150.0))


@given(hnp.arrays(np.float64, st.integers(0, 300), elements=st.floats(-10, 10)),
       st.integers(1, 50))
def test_tiled_segments_reproduce_prefix(x, window):
    segs = dsp.segment_signal(x, window)
    if not segs:
        assert len(x) < window
        return
    joined = np.concatenate([s.samples for s in segs])
    np.testing.assert_array_equal(joined, x[: len(joined)])
    assert len(x) - len(joined) < window


@given(st.integers(0, 400), st.integers(1, 60), st.integers(1, 60))
def test_segments_stay_in_bounds(length, window, hop):
    x = np.arange(float(length))
    for seg in dsp.segment_signal(x, window, hop):
        assert 0 <= seg.start and seg.start + window <= length
        np.testing.assert_array_equal(seg.samples, x[seg.start: seg.start + window])


# --------------------------------------------------------------------------- normalize


def test_normalize_flat_line():
    np.testing.assert_array_equal(dsp.normalize([5.0] * 106), np.zeros(106))


def test_normalize_already_standard():
    np.testing.assert_array_equal(dsp.normalize([-1.0, 1.0]), [-1.0, 1.0])


@settings(max_examples=200)
@given(hnp.arrays(np.float64, st.integers(2, 200), elements=st.floats(-50, 50)))
def test_normalize_moments(x):
    y = dsp.normalize(x)
    if np.std(x) < dsp.FLAT_STD:
        assert not y.any()
        return
    z = dsp.normalize(y)
    assert abs(y.mean()) < 1e-12
    if np.std(x) > 1e-6:
        assert abs(y.std() - 1) < 1e-9
        assert np.max(np.abs(z - y)) < 1e-9


def test_normalize_rows_match_single():
    m = np.random.default_rng(3).normal(2, 4, size=(5, 106))
    m[2] = 7.0
    rows = dsp.normalize(m)
    for i in range(5):
        np.testing.assert_allclose(rows[i], dsp.normalize(m[i]), atol=1e-15)


# --------------------------------------------------------------------------- codec


def test_zero_vector_block():
    block = dsp.compress([0, 0, 0, 0])
    assert block.deltas == b"\x00\x00\x00"
    assert block.to_bytes() == bytes.fromhex("01 0000 04000000 000000")
    np.testing.assert_array_equal(dsp.decompress(block), [0, 0, 0, 0])


def test_single_sample_block():
    block = dsp.compress([-123])
    assert block.deltas == b""
    assert block.to_bytes() == bytes.fromhex("01 85ff 01000000")
    assert dsp.decompress(block).tolist() == [-123]


def test_extreme_delta_bytes():
    # delta +65535 -> zig-zag 131070 = 0b111_1111111_1111110
    block = dsp.compress([-32768, 32767, -32768])
    assert block.deltas == bytes([0xFE, 0xFF, 0x07, 0xFD, 0xFF, 0x07])
    assert dsp.decompress(block).tolist() == [-32768, 32767, -32768]


def test_small_deltas_zigzag():
    assert dsp.compress([0, -1, 0, 1, 3]).deltas == bytes([1, 2, 2, 4])


def test_ramp_size_follows_one_byte_per_delta():
    ramp = (np.arange(1000) // 3).astype(np.int16)  # |delta| <= 1
    block = dsp.compress(ramp)
    assert len(block) == 7 + 999
    assert len(block) / 2000 < 0.51
    np.testing.assert_array_equal(dsp.decompress(block), ramp)


@pytest.mark.xfail(strict=True, reason="one varint byte per delta cannot go below ~50% of raw")
def test_ramp_under_forty_percent():
    ramp = (np.arange(1000) // 3).astype(np.int16)
    assert len(dsp.compress(ramp)) < 0.4 * 2000


@settings(max_examples=300)
@given(hnp.arrays(np.int16, st.integers(1, 300),
                  elements=st.integers(-32768, 32767) | st.sampled_from([-32768, 32767, 0])))
def test_codec_roundtrip(x):
    block = dsp.compress(x)
    np.testing.assert_array_equal(dsp.decompress(block), x)
    serial = block.to_bytes()
    np.testing.assert_array_equal(dsp.decode_block(serial)[0], x)
    assert dsp.CompressedBlock.from_bytes(serial) == block


def test_decode_block_reports_end_offset():
    a = dsp.compress([1, 2, 300]).to_bytes()
    b = dsp.compress([7]).to_bytes()
    buf = a + b
    first, end = dsp.decode_block(buf, 0)
    second, end2 = dsp.decode_block(buf, end)
    assert first.tolist() == [1, 2, 300] and second.tolist() == [7] and end2 == len(buf)


def test_codec_errors():
    with pytest.raises(dsp.EmptySignal):
        dsp.compress([])
    with pytest.raises(ValueError):
        dsp.compress([40000])
    with pytest.raises(dsp.TruncatedStream):
        dsp.decompress(dsp.CompressedBlock(0, b"\x80", 2))
    with pytest.raises(dsp.TruncatedStream):
        dsp.decompress(dsp.CompressedBlock(0, b"\x00", 10**9))
    with pytest.raises(dsp.OverlongVarint):
        dsp.decompress(dsp.CompressedBlock(0, b"\x80\x80\x80\x01", 2))
    with pytest.raises(dsp.SampleOverflow):
        dsp.decompress(dsp.CompressedBlock(32767, b"\x02", 2))
    with pytest.raises(dsp.CodecError):
        dsp.decompress(dsp.CompressedBlock(0, b"\x00\x00", 2))
    with pytest.raises(dsp.UnknownCodec):
        dsp.decode_block(b"\x02\x00\x00\x01\x00\x00\x00")
    with pytest.raises(dsp.TruncatedStream):
        dsp.decode_block(b"\x01\x00")


@settings(max_examples=300)
@given(st.binary(max_size=40))
def test_decode_block_never_crashes(blob):
    try:
        dsp.decode_block(blob)
    except dsp.CodecError:
        pass
