"""Pure-Python implementations of the hot kernels.

Mirrors ``icrm._kernels`` call for call; selected by ``icrm.kernels`` when the
compiled extension is missing or ``ICRM_PURE_PYTHON`` is set.
"""
import numpy as np

# decode status codes shared with the compiled kernels
OK = 0
TRUNCATED = 1
OVERLONG = 2
OUT_OF_RANGE = 3

OUTPUT_SOFTMAX = 0
OUTPUT_SIGMOID = 1


def _make_crc_table():
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
        table.append(crc & 0xFFFF)
    return table


_CRC_TABLE = _make_crc_table()


def crc16_ccitt(data, init=0xFFFF):
    crc = init & 0xFFFF
    table = _CRC_TABLE
    for b in bytes(data):
        crc = ((crc << 8) & 0xFFFF) ^ table[((crc >> 8) ^ b) & 0xFF]
    return crc


def encode_deltas(samples):
    """Zig-zag varint stream of successive differences of an int16 vector."""
    values = np.asarray(samples, dtype=np.int64)
    out = bytearray()
    prev = int(values[0])
    for v in values[1:].tolist():
        d = v - prev
        prev = v
        z = (d << 1) if d >= 0 else ((-d) << 1) - 1
        while z >= 0x80:
            out.append((z & 0x7F) | 0x80)
            z >>= 7
        out.append(z)
    return bytes(out)


def decode_deltas(buf, offset, first, count):
    """Decode ``count - 1`` deltas starting at ``buf[offset]``.

    Returns ``(samples, end_offset, status)``; ``samples`` is only meaningful
    when ``status == OK``.
    """
    out = np.empty(count, dtype=np.int16)
    if count == 0:
        return out, offset, OK
    data = memoryview(buf)
    n = len(data)
    pos = offset
    current = int(first)
    out[0] = current
    for i in range(1, count):
        z = 0
        shift = 0
        while True:
            if pos >= n:
                return out, pos, TRUNCATED
            b = data[pos]
            pos += 1
            z |= (b & 0x7F) << shift
            if b < 0x80:
                break
            shift += 7
            if shift >= 21:
                return out, pos, OVERLONG
        d = (z >> 1) if not z & 1 else -((z + 1) >> 1)
        current += d
        if current < -32768 or current > 32767:
            return out, pos, OUT_OF_RANGE
        out[i] = current
    return out, pos, OK


def sgd_epoch(W1, b1, W2, b2, vW1, vb1, vW2, vb2, X, T, order, lr, momentum, output_kind):
    """One pass of per-sample momentum SGD on squared error, updating arrays in place."""
    n_out = W2.shape[0]
    scale = 2.0 / n_out
    for idx in order:
        x = X[idx]
        t = T[idx]
        h = np.tanh(W1 @ x + b1)
        z = W2 @ h + b2
        if output_kind == OUTPUT_SOFTMAX:
            e = np.exp(z - z.max())
            y = e / e.sum()
            g = scale * (y - t)
            dz = y * (g - np.dot(g, y))
        else:
            y = 1.0 / (1.0 + np.exp(-z))
            g = scale * (y - t)
            dz = g * y * (1.0 - y)
        da = (W2.T @ dz) * (1.0 - h * h)
        vW2 *= momentum
        vW2 -= lr * np.outer(dz, h)
        vb2 *= momentum
        vb2 -= lr * dz
        vW1 *= momentum
        vW1 -= lr * np.outer(da, x)
        vb1 *= momentum
        vb1 -= lr * da
        W2 += vW2
        b2 += vb2
        W1 += vW1
        b1 += vb1
