"""The compiled kernels and their pure-Python twin must agree bit for bit."""
import binascii

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icrm import kernels

BACKENDS = kernels.backends()
compiled = pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")

int16s = st.lists(st.integers(-32768, 32767), min_size=1, max_size=300)


@pytest.mark.parametrize("name", sorted(BACKENDS))
@given(data=st.binary(max_size=512))
@settings(max_examples=200, deadline=None)
def test_crc_matches_binascii(name, data):
    assert BACKENDS[name].crc16_ccitt(data, 0xFFFF) == binascii.crc_hqx(data, 0xFFFF)


@compiled
@given(samples=int16s)
@settings(max_examples=300, deadline=None)
def test_delta_encoding_identical_across_backends(samples):
    x = np.array(samples, dtype=np.int16)
    a = bytes(BACKENDS["python"].encode_deltas(x))
    b = bytes(BACKENDS["compiled"].encode_deltas(x))
    assert a == b
    for impl in BACKENDS.values():
        out, pos, status = impl.decode_deltas(a, 0, int(x[0]), x.size)
        assert status == kernels.OK and pos == len(a)
        np.testing.assert_array_equal(np.asarray(out), x)


@compiled
@pytest.mark.parametrize("buf", [b"", b"\x80", b"\xff" * 4, b"\x80\x80\x80\x80\x01"])
def test_decode_errors_agree(buf):
    results = {name: impl.decode_deltas(buf, 0, 32767, 2)[2] for name, impl in BACKENDS.items()}
    assert len(set(results.values())) == 1
    assert results["python"] != kernels.OK


def _net(rng, sizes):
    n_in, h, n_out = sizes
    return [rng.normal(0, 0.3, (h, n_in)), rng.normal(0, 0.1, h),
            rng.normal(0, 0.3, (n_out, h)), rng.normal(0, 0.1, n_out)]


@compiled
@pytest.mark.parametrize("output", [kernels.OUTPUT_SOFTMAX, kernels.OUTPUT_SIGMOID])
def test_sgd_epoch_backends_agree(output):
    rng = np.random.default_rng(3)
    sizes = (12, 5, 3)
    X = rng.normal(size=(40, 12))
    T = np.eye(3)[rng.integers(0, 3, 40)]
    order = rng.permutation(40).astype(np.int64)
    results = []
    for impl in (BACKENDS["python"], BACKENDS["compiled"]):
        params = _net(np.random.default_rng(9), sizes)
        vel = [np.zeros_like(p) for p in params]
        for _ in range(3):
            impl.sgd_epoch(*params, *vel, X, T, order, 0.05, 0.9, output)
        results.append(params)
    for a, b in zip(*results):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_single_sample_step_is_plain_gradient_descent(name):
    # momentum 0 and one sample: W <- W - lr * dL/dW with L = mean squared error
    rng = np.random.default_rng(5)
    W1, b1, W2, b2 = _net(rng, (4, 3, 2))
    x = rng.normal(size=(1, 4))
    t = np.array([[1.0, 0.0]])
    lr = 0.1

    h = np.tanh(W1 @ x[0] + b1)
    y = 1 / (1 + np.exp(-(W2 @ h + b2)))
    dz = (2 / 2) * (y - t[0]) * y * (1 - y)
    da = (W2.T @ dz) * (1 - h * h)
    expect = [W1 - lr * np.outer(da, x[0]), b1 - lr * da, W2 - lr * np.outer(dz, h), b2 - lr * dz]

    params = [p.copy() for p in (W1, b1, W2, b2)]
    vel = [np.zeros_like(p) for p in params]
    BACKENDS[name].sgd_epoch(*params, *vel, x, t, np.zeros(1, dtype=np.int64), lr, 0.0,
                             kernels.OUTPUT_SIGMOID)
    for got, want in zip(params, expect):
        np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-15)


def test_backend_flag_is_reported():
    assert kernels.BACKEND in BACKENDS
