# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: CRC-16/CCITT, delta-varint codec, per-sample SGD epoch."""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, exp

cnp.import_array()

cdef enum:
    _OK = 0
    _TRUNCATED = 1
    _OVERLONG = 2
    _OUT_OF_RANGE = 3

OK = _OK
TRUNCATED = _TRUNCATED
OVERLONG = _OVERLONG
OUT_OF_RANGE = _OUT_OF_RANGE

OUTPUT_SOFTMAX = 0
OUTPUT_SIGMOID = 1

cdef unsigned short _crc_table[256]


cdef void _init_crc_table():
    cdef unsigned int byte, crc, k
    for byte in range(256):
        crc = byte << 8
        for k in range(8):
            if crc & 0x8000:
                crc = (crc << 1) ^ 0x1021
            else:
                crc = crc << 1
        _crc_table[byte] = crc & 0xFFFF


_init_crc_table()


def crc16_ccitt(const unsigned char[:] data, unsigned int init=0xFFFF):
    cdef Py_ssize_t i, n = data.shape[0]
    cdef unsigned int crc = init & 0xFFFF
    with nogil:
        for i in range(n):
            crc = ((crc << 8) & 0xFFFF) ^ _crc_table[((crc >> 8) ^ data[i]) & 0xFF]
    return crc


def encode_deltas(samples):
    cdef cnp.int16_t[::1] values = np.ascontiguousarray(samples, dtype=np.int16)
    cdef Py_ssize_t n = values.shape[0], i, pos = 0
    out_arr = np.empty(max(3 * (n - 1), 0), dtype=np.uint8)
    cdef unsigned char[::1] out = out_arr
    cdef int d
    cdef unsigned int z
    with nogil:
        for i in range(1, n):
            d = <int>values[i] - <int>values[i - 1]
            z = <unsigned int>((d << 1) ^ (d >> 31))
            while z >= 0x80:
                out[pos] = (z & 0x7F) | 0x80
                pos += 1
                z >>= 7
            out[pos] = z
            pos += 1
    return out_arr[:pos].tobytes()


def decode_deltas(const unsigned char[:] buf, Py_ssize_t offset, int first, Py_ssize_t count):
    out_arr = np.empty(count, dtype=np.int16)
    if count == 0:
        return out_arr, offset, _OK
    cdef cnp.int16_t[::1] out = out_arr
    cdef Py_ssize_t n = buf.shape[0], pos = offset, i
    cdef unsigned int z, b, shift
    cdef long current = first
    cdef int status = _OK
    out[0] = <cnp.int16_t>current
    with nogil:
        for i in range(1, count):
            z = 0
            shift = 0
            while True:
                if pos >= n:
                    status = _TRUNCATED
                    break
                b = buf[pos]
                pos += 1
                z |= (b & 0x7F) << shift
                if b < 0x80:
                    break
                shift += 7
                if shift >= 21:
                    status = _OVERLONG
                    break
            if status != _OK:
                break
            if z & 1:
                current -= <long>((z + 1) >> 1)
            else:
                current += <long>(z >> 1)
            if current < -32768 or current > 32767:
                status = _OUT_OF_RANGE
                break
            out[i] = <cnp.int16_t>current
    return out_arr, pos, status


def sgd_epoch(double[:, ::1] W1, double[::1] b1, double[:, ::1] W2, double[::1] b2,
              double[:, ::1] vW1, double[::1] vb1, double[:, ::1] vW2, double[::1] vb2,
              const double[:, ::1] X, const double[:, ::1] T, const cnp.int64_t[::1] order,
              double lr, double momentum, int output_kind):
    cdef Py_ssize_t n_hidden = W1.shape[0], n_in = W1.shape[1], n_out = W2.shape[0]
    cdef Py_ssize_t s, idx, i, j, k
    cdef double acc, zmax, esum, gy, scale = 2.0 / n_out
    h_arr = np.empty(n_hidden)
    y_arr = np.empty(n_out)
    dz_arr = np.empty(n_out)
    da_arr = np.empty(n_hidden)
    cdef double[::1] h = h_arr, y = y_arr, dz = dz_arr, da = da_arr
    with nogil:
        for s in range(order.shape[0]):
            idx = order[s]
            for j in range(n_hidden):
                acc = b1[j]
                for i in range(n_in):
                    acc = acc + W1[j, i] * X[idx, i]
                h[j] = tanh(acc)
            for k in range(n_out):
                acc = b2[k]
                for j in range(n_hidden):
                    acc = acc + W2[k, j] * h[j]
                y[k] = acc
            if output_kind == 0:
                zmax = y[0]
                for k in range(1, n_out):
                    if y[k] > zmax:
                        zmax = y[k]
                esum = 0.0
                for k in range(n_out):
                    y[k] = exp(y[k] - zmax)
                    esum = esum + y[k]
                for k in range(n_out):
                    y[k] = y[k] / esum
                gy = 0.0
                for k in range(n_out):
                    dz[k] = scale * (y[k] - T[idx, k])
                    gy = gy + dz[k] * y[k]
                for k in range(n_out):
                    dz[k] = y[k] * (dz[k] - gy)
            else:
                for k in range(n_out):
                    y[k] = 1.0 / (1.0 + exp(-y[k]))
                    dz[k] = scale * (y[k] - T[idx, k]) * y[k] * (1.0 - y[k])
            for j in range(n_hidden):
                acc = 0.0
                for k in range(n_out):
                    acc = acc + W2[k, j] * dz[k]
                da[j] = acc * (1.0 - h[j] * h[j])
            for k in range(n_out):
                for j in range(n_hidden):
                    vW2[k, j] = momentum * vW2[k, j] - lr * dz[k] * h[j]
                vb2[k] = momentum * vb2[k] - lr * dz[k]
            for j in range(n_hidden):
                for i in range(n_in):
                    vW1[j, i] = momentum * vW1[j, i] - lr * da[j] * X[idx, i]
                vb1[j] = momentum * vb1[j] - lr * da[j]
            for k in range(n_out):
                for j in range(n_hidden):
                    W2[k, j] += vW2[k, j]
                b2[k] += vb2[k]
            for j in range(n_hidden):
                for i in range(n_in):
                    W1[j, i] += vW1[j, i]
                b1[j] += vb1[j]
